"""Helpers shared by every command module: parsing, logging, run records and output."""

from __future__ import annotations

import argparse
import json
import logging
import re
import sys
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, TextIO, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, Field, RootModel, StrictBool, StrictFloat, StrictInt, StrictStr, ValidationError

from config import LOG_FORMAT, Settings
from models import HeadHyperparams, Hyperparams, MaterialTriplet

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
FORMATS = ("json", "csv")
# options whose values are comma lists of numbers and may start with a minus sign
NUMBER_LIST_OPTIONS = ("--F", "--triplet", "--a", "--b")
NEGATIVE_LEAD = re.compile(r"^-[0-9.]")
OVERRIDE_NAMES = tuple(sorted((set(Hyperparams.__dataclass_fields__) | set(HeadHyperparams.__dataclass_fields__)) - {"seed"}))


class CliUsageError(Exception):
    """Raised for malformed command lines; maps to exit code 1."""


class CliParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting on bad input."""

    def error(self, message: str) -> None:  # type: ignore[override]
        raise CliUsageError(f"{self.prog}: {message}")


class RunConfig(BaseModel):
    command: List[str]
    inputs: Dict[str, str] = Field(default_factory=dict)
    outputs: Dict[str, str] = Field(default_factory=dict)
    seed: Optional[int] = None
    overrides: Dict[str, Any] = Field(default_factory=dict)


def option_parser() -> CliParser:
    """Options accepted by every leaf command."""
    parser = CliParser(add_help=False)
    verbosity = parser.add_mutually_exclusive_group()
    verbosity.add_argument("--quiet", action="store_true", help="Only warnings and errors; no progress bars.")
    verbosity.add_argument("--verbose", action="store_true", help="Debug logging.")
    parser.add_argument("--config", type=Path, help="JSON file whose keys become option defaults.")
    parser.add_argument("--format", choices=FORMATS, default="json", help="Report format on stdout.")
    return parser


def configure_logging(args: argparse.Namespace, settings: Settings) -> None:
    if getattr(args, "quiet", False):
        level = logging.WARNING
    elif getattr(args, "verbose", False):
        level = logging.DEBUG
    else:
        level = getattr(logging, settings.log_level)
    logging.basicConfig(level=level, format=LOG_FORMAT, stream=sys.stderr, force=True)


ConfigScalar = Union[StrictBool, StrictInt, StrictFloat, StrictStr]


class ConfigFile(RootModel[Dict[str, Union[ConfigScalar, List[ConfigScalar], None]]]):
    """A ``--config`` file: one JSON object of option names to plain values."""


def load_config_defaults(path: Path) -> Dict[str, Any]:
    if not path.exists():
        raise CliUsageError(f"Config file {path} does not exist.")
    try:
        raw = ConfigFile.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as exc:
        raise CliUsageError(f"Config file {path} is not a JSON object of option values: {exc}") from exc
    return {key.replace("-", "_"): value for key, value in raw.root.items()}


def check_config_defaults(parser: argparse.ArgumentParser, defaults: Dict[str, Any], command: str) -> Dict[str, Any]:
    """Converts config values with the target options' own types; unknown or ill-typed keys are usage errors."""
    actions = {action.dest: action for action in parser._actions if action.dest not in ("help", "config")}
    unknown = sorted(set(defaults) - set(actions))
    if unknown:
        raise CliUsageError(f"Config keys {unknown} are not options of {command}.")
    checked: Dict[str, Any] = {}
    for dest, value in defaults.items():
        action = actions[dest]
        if action.nargs == 0:
            if not isinstance(value, bool):
                raise CliUsageError(f"Config key {dest!r} is a flag and needs true or false, got {value!r}.")
            checked[dest] = value
            continue
        if value is None:
            checked[dest] = None
            continue
        values = value if isinstance(value, list) else [value]
        try:
            converted = [action.type(v) if action.type is not None else v for v in values]
        except (TypeError, ValueError) as exc:
            raise CliUsageError(f"Config key {dest!r} has an invalid value {value!r}: {exc}") from exc
        if action.choices is not None and any(v not in action.choices for v in converted):
            raise CliUsageError(f"Config key {dest!r} must be one of {sorted(action.choices)}, got {value!r}.")
        checked[dest] = converted if isinstance(value, list) else converted[0]
    return checked


def attach_negative_values(argv: Sequence[str]) -> List[str]:
    """Joins ``--F -1,0,...`` into ``--F=-1,0,...`` so argparse does not read the value as an option."""
    joined: List[str] = []
    tokens = list(argv)
    i = 0
    while i < len(tokens):
        token = tokens[i]
        if token in NUMBER_LIST_OPTIONS and i + 1 < len(tokens) and NEGATIVE_LEAD.match(tokens[i + 1]):
            joined.append(f"{token}={tokens[i + 1]}")
            i += 2
            continue
        joined.append(token)
        i += 1
    return joined


def run_config(args: argparse.Namespace, overrides: Sequence[str] = OVERRIDE_NAMES) -> RunConfig:
    inputs: Dict[str, str] = {}
    outputs: Dict[str, str] = {}
    for name, value in sorted(vars(args).items()):
        if not isinstance(value, Path) or name == "config":
            continue
        target = outputs if name.startswith("out") else inputs
        target[name] = str(value.resolve())
    return RunConfig(
        command=list(args.command),
        inputs=inputs,
        outputs=outputs,
        seed=getattr(args, "seed", None),
        overrides={name: getattr(args, name) for name in overrides if getattr(args, name, None) is not None},
    )


def require_seed(args: argparse.Namespace) -> int:
    if getattr(args, "seed", None) is None:
        raise CliUsageError(f"{' '.join(args.command)} needs --seed.")
    return int(args.seed)


def parse_triplet(text: str) -> MaterialTriplet:
    """``E,nu,rho`` on the command line."""
    parts = [part.strip() for part in text.split(",")]
    if len(parts) != 3:
        raise CliUsageError(f"Expected E,nu,rho but got {text!r}.")
    try:
        e, nu, rho = (float(part) for part in parts)
    except ValueError as exc:
        raise CliUsageError(f"Triplet {text!r} is not numeric.") from exc
    return MaterialTriplet(e, nu, rho)


def parse_matrix(text: str) -> np.ndarray:
    try:
        values = [float(part) for part in text.replace(";", ",").split(",") if part.strip()]
    except ValueError as exc:
        raise CliUsageError(f"Matrix {text!r} is not numeric.") from exc
    if len(values) != 9:
        raise CliUsageError(f"A 3x3 matrix needs 9 values, got {len(values)}.")
    return np.array(values, dtype=np.float64).reshape(3, 3)


def _plain(value: Any) -> Any:
    if isinstance(value, dict):
        return {str(key): _plain(item) for key, item in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(item) for item in value]
    if isinstance(value, np.ndarray):
        return _plain(value.tolist())
    if isinstance(value, np.generic):
        return value.item()
    return value


def emit(payload: Any, fmt: str, out: Optional[Path] = None, stream: Optional[TextIO] = None) -> None:
    """Writes a report as JSON, or as CSV when it is a DataFrame or a list of rows."""
    if fmt == "csv":
        frame = payload if isinstance(payload, pd.DataFrame) else pd.json_normalize(_plain(payload), sep=".")
        text = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
    else:
        if isinstance(payload, pd.DataFrame):
            payload = payload.to_dict(orient="records")
        text = json.dumps(_plain(payload), indent=2, sort_keys=True) + "\n"
    if out is not None:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
        logger.info("Wrote report to %s", out)
    else:
        (stream or sys.stdout).write(text)
