"""``mtd`` commands: sample, dedupe and validate material triplets."""

from __future__ import annotations

import argparse
import logging
from pathlib import Path
from typing import TYPE_CHECKING

from cli import common
from config import Settings
from models import MaterialRangeDb, triplets_to_array
from services import mtd_service
from storage import tables

if TYPE_CHECKING:
    from cli.routing import Router

logger = logging.getLogger(__name__)


class MtdCommands:
    def __init__(self, settings: Settings) -> None:
        self.settings = settings

    def register(self, router: "Router", areas: argparse._SubParsersAction) -> None:
        commands = router.group(areas, "mtd", "Material triplet database.")

        sample = router.leaf(commands, ("mtd", "sample"), self.sample, "Draw triplets from the range database.")
        sample.add_argument("--count", type=int, required=True)
        sample.add_argument("--seed", type=int)
        sample.add_argument("--ranges", type=Path, help="Range JSON; defaults to MATFIELD_RANGES.")
        sample.add_argument("--dedupe", action="store_true", help="Drop duplicates after sampling.")
        sample.add_argument("--out", type=Path, required=True)

        dedupe = router.leaf(commands, ("mtd", "dedupe"), self.dedupe, "Remove duplicate triplets.")
        dedupe.add_argument("triplets", type=Path)
        dedupe.add_argument("--out", type=Path, required=True)

        validate = router.leaf(commands, ("mtd", "validate"), self.validate, "Distance of triplets to the nearest range.")
        validate.add_argument("triplets", type=Path)
        validate.add_argument("--ranges", type=Path)

    def _db(self, args: argparse.Namespace) -> MaterialRangeDb:
        return mtd_service.load_ranges(args.ranges or self.settings.ranges_path)

    def sample(self, args: argparse.Namespace) -> int:
        seed = common.require_seed(args)
        db = self._db(args)
        triplets = mtd_service.sample_triplets(db, args.count, seed)
        if args.dedupe:
            triplets = mtd_service.dedupe(triplets)
        tables.write_triplets(args.out, triplets)
        return common.EXIT_OK

    def dedupe(self, args: argparse.Namespace) -> int:
        triplets = tables.read_triplets(args.triplets)
        unique = mtd_service.dedupe(triplets)
        logger.info("Kept %d of %d triplets", len(unique), len(triplets))
        tables.write_triplets(args.out, unique)
        return common.EXIT_OK

    def validate(self, args: argparse.Namespace) -> int:
        db = self._db(args)
        values = triplets_to_array(tables.read_triplets(args.triplets))
        errors = mtd_service.validity_errors(values, db)
        report = {
            "count": len(values),
            "valid_fraction": mtd_service.valid_fraction(values, db),
            "mean_error": dict(zip(("e", "nu", "rho"), errors.mean(axis=0).tolist())) if len(values) else {},
            "max_error": dict(zip(("e", "nu", "rho"), errors.max(axis=0).tolist())) if len(values) else {},
        }
        common.emit(report, args.format)
        return common.EXIT_OK
