"""JSON checkpoints for the latent material model and the field prediction head."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Type, TypeVar, Union

from pydantic import BaseModel, ValidationError

from storage.errors import FormatError, StorageError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

T = TypeVar("T", bound=BaseModel)


class TensorRecord(BaseModel):
    name: str
    value: Union[float, List[Any]]


class FlowRecord(BaseModel):
    z0: List[float]
    log_alpha_raw: float
    beta_raw: float


class MatVaeCheckpoint(BaseModel):
    version: Literal[1] = CHECKPOINT_VERSION
    normalizer: Dict[str, float]
    encoder: List[TensorRecord]
    decoder: List[TensorRecord]
    flow: FlowRecord
    meta: Dict[str, Any]


class HeadCheckpoint(BaseModel):
    version: Literal[1] = CHECKPOINT_VERSION
    kind: Literal["field_head"] = "field_head"
    layers: List[TensorRecord]
    meta: Dict[str, Any]


class CheckpointRepository:
    """Stores one checkpoint document per file.

    Floats are written with Python's shortest round-trip repr, so loading a
    saved checkpoint reproduces every tensor bit for bit.
    """

    def __init__(self, storage_path: Path) -> None:
        self.storage_path = Path(storage_path)

    def save(self, checkpoint: BaseModel) -> None:
        self.storage_path.parent.mkdir(parents=True, exist_ok=True)
        with self.storage_path.open("w", encoding="utf-8") as fh:
            json.dump(checkpoint.model_dump(mode="python"), fh)
        logger.info("Wrote checkpoint %s", self.storage_path)

    def load_matvae(self) -> MatVaeCheckpoint:
        return self._load(MatVaeCheckpoint)

    def load_head(self) -> HeadCheckpoint:
        return self._load(HeadCheckpoint)

    def _load(self, schema: Type[T]) -> T:
        if not self.storage_path.exists():
            raise StorageError(f"Checkpoint {self.storage_path} does not exist.")
        try:
            with self.storage_path.open("r", encoding="utf-8") as fh:
                raw = json.load(fh)
            return schema.model_validate(raw)
        except (json.JSONDecodeError, ValidationError) as exc:
            raise FormatError(f"Checkpoint {self.storage_path} is malformed: {exc}") from exc
