"""argparse router dispatching ``area command`` pairs to the command modules."""

from __future__ import annotations

import argparse
import logging
import sys
from typing import Callable, Dict, List, Optional, Sequence, Tuple

from cli import common
from cli.analysis_commands import ElasticityCommands, MetricsCommands
from cli.field_commands import FieldCommands
from cli.matvae_commands import MatVaeCommands
from cli.mtd_commands import MtdCommands
from cli.voxel_commands import VoxelCommands
from config import Settings, get_settings
from services.feature_service import FeatureServiceError
from services.field_service import FieldServiceError
from services.matvae_errors import MatVaeServiceError
from services.metrics_service import MetricsServiceError
from services.mtd_service import MtdServiceError
from services.transfer_service import TransferServiceError
from services.voxel_service import VoxelServiceError
from storage.errors import StorageError

logger = logging.getLogger(__name__)

Handler = Callable[[argparse.Namespace], Optional[int]]

DATA_ERRORS = (
    MtdServiceError,
    MatVaeServiceError,
    VoxelServiceError,
    FeatureServiceError,
    FieldServiceError,
    MetricsServiceError,
    TransferServiceError,
    StorageError,
    ValueError,
    OSError,
)


class Router:
    def __init__(self, settings: Optional[Settings] = None) -> None:
        self.settings = settings or get_settings()
        self.options = common.option_parser()
        self.leaves: Dict[Tuple[str, ...], common.CliParser] = {}
        self.parser = common.CliParser(
            prog="matfield", description="Material field toolkit: sample, learn, voxelize, lift, predict, evaluate."
        )
        areas = self.parser.add_subparsers(dest="area", metavar="<area>", required=True)
        MtdCommands(self.settings).register(self, areas)
        MatVaeCommands(self.settings).register(self, areas)
        VoxelCommands(self.settings).register(self, areas)
        FieldCommands(self.settings).register(self, areas)
        MetricsCommands(self.settings).register(self, areas)
        ElasticityCommands(self.settings).register(self, areas)

    def group(self, areas: argparse._SubParsersAction, name: str, help_text: str) -> argparse._SubParsersAction:
        parser = areas.add_parser(name, help=help_text, description=help_text)
        return parser.add_subparsers(dest=f"{name}_command", metavar="<command>", required=True)

    def leaf(
        self,
        subparsers: argparse._SubParsersAction,
        command: Tuple[str, ...],
        handler: Handler,
        help_text: str,
    ) -> common.CliParser:
        parser = subparsers.add_parser(command[-1], help=help_text, description=help_text, parents=[self.options])
        parser.set_defaults(handler=handler, command=command)
        self.leaves[command] = parser
        return parser

    def parse(self, argv: Sequence[str]) -> argparse.Namespace:
        argv = common.attach_negative_values(argv)
        args = self.parser.parse_args(argv)
        if args.config is None:
            return args
        leaf = self.leaves[tuple(args.command)]
        defaults = common.check_config_defaults(leaf, common.load_config_defaults(args.config), " ".join(args.command))
        # explicit flags still win over config values on the second pass
        leaf.set_defaults(**defaults)
        return self.parser.parse_args(argv)

    def run(self, argv: Sequence[str]) -> int:
        try:
            args = self.parse(argv)
        except common.CliUsageError as exc:
            print(f"usage error: {exc}", file=sys.stderr)
            return common.EXIT_USAGE
        except SystemExit as exc:
            # --help and --version exit through argparse
            return int(exc.code or 0)
        common.configure_logging(args, self.settings)
        logger.debug("Resolved run: %s", common.run_config(args).model_dump_json())
        try:
            return args.handler(args) or common.EXIT_OK
        except common.CliUsageError as exc:
            print(f"usage error: {exc}", file=sys.stderr)
            return common.EXIT_USAGE
        except DATA_ERRORS as exc:
            logger.debug("Command %s failed", " ".join(args.command), exc_info=True)
            print(f"error: {exc}", file=sys.stderr)
            return common.EXIT_DATA


def run(argv: Optional[List[str]] = None) -> int:
    return Router().run(sys.argv[1:] if argv is None else argv)
