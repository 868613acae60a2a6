"""Environment-backed settings for the material field toolkit."""

from __future__ import annotations

import os
from pathlib import Path

from dotenv import load_dotenv
from pydantic import BaseModel, Field, field_validator

load_dotenv()

REPO_ROOT = Path(__file__).resolve().parent
DEFAULT_RANGES_PATH = REPO_ROOT / "data" / "mtd_ranges.json"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"


class Settings(BaseModel):
    log_level: str = "INFO"
    ranges_path: Path = DEFAULT_RANGES_PATH
    carve_pixels_per_cell: int = Field(default=4, ge=1)

    @field_validator("log_level")
    @classmethod
    def _upper_level(cls, value: str) -> str:
        level = value.strip().upper()
        if level not in {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}:
            raise ValueError(f"Unknown log level {value!r}.")
        return level


def get_settings() -> Settings:
    return Settings(
        log_level=os.getenv("MATFIELD_LOG_LEVEL", "INFO"),
        ranges_path=Path(os.getenv("MATFIELD_RANGES", str(DEFAULT_RANGES_PATH))),
        carve_pixels_per_cell=int(os.getenv("MATFIELD_CARVE_PIXELS_PER_CELL", "4")),
    )
