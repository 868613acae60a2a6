"""JSON-backed repository for the material range database."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from threading import Lock
from typing import List, Optional, Tuple

from pydantic import BaseModel, ConfigDict, ValidationError, field_validator

from config import DEFAULT_RANGES_PATH
from models import MaterialRange, MaterialRangeDb
from storage.errors import FormatError, StorageError

logger = logging.getLogger(__name__)


class RangeRecord(BaseModel):
    """Shape of one entry in the range JSON file."""

    model_config = ConfigDict(extra="forbid")

    name: str
    e_pa: Tuple[float, float]
    nu: Tuple[float, float]
    rho_kgm3: Tuple[float, float]

    @field_validator("name")
    @classmethod
    def _non_blank(cls, value: str) -> str:
        if not value.strip():
            raise ValueError("range name must not be blank")
        return value.strip()

    def to_range(self) -> MaterialRange:
        return MaterialRange(
            name=self.name,
            e_lo=self.e_pa[0],
            e_hi=self.e_pa[1],
            nu_lo=self.nu[0],
            nu_hi=self.nu[1],
            rho_lo=self.rho_kgm3[0],
            rho_hi=self.rho_kgm3[1],
        )


class RangeRepository:
    """Reads and writes the range database as a JSON array."""

    def __init__(self, storage_path: Optional[Path] = None) -> None:
        self.storage_path = Path(storage_path or DEFAULT_RANGES_PATH)
        self._lock = Lock()

    def load(self) -> List[MaterialRange]:
        with self._lock:
            return self._load()

    def save(self, db: MaterialRangeDb) -> None:
        with self._lock:
            self._write(db)

    def _load(self) -> List[MaterialRange]:
        if not self.storage_path.exists():
            raise StorageError(f"Range database {self.storage_path} does not exist.")
        try:
            with self.storage_path.open("r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise FormatError(f"Range database {self.storage_path} is not valid JSON: {exc}") from exc
        if not isinstance(raw, list):
            raise FormatError(f"Range database {self.storage_path} must hold a JSON array.")
        ranges: List[MaterialRange] = []
        for position, payload in enumerate(raw):
            try:
                ranges.append(RangeRecord.model_validate(payload).to_range())
            except ValidationError as exc:
                raise FormatError(f"Range entry {position} in {self.storage_path} is malformed: {exc}") from exc
        logger.info("Loaded %d material ranges from %s", len(ranges), self.storage_path)
        return ranges

    def _write(self, db: MaterialRangeDb) -> None:
        self.storage_path.parent.mkdir(parents=True, exist_ok=True)
        with self.storage_path.open("w", encoding="utf-8") as fh:
            json.dump(db.to_dict(), fh, indent=2)
        logger.info("Wrote %d material ranges to %s", len(db), self.storage_path)
