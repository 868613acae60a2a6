"""CSV tables exchanged by the command line tools."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from models import GaussianSplat, InvalidTripletError, MaterialTriplet, array_to_triplets, triplets_to_array
from storage.errors import FormatError, StorageError

logger = logging.getLogger(__name__)

TRIPLET_COLUMNS = ["e_pa", "nu", "rho_kgm3"]
LATENT_COLUMNS = ["z0", "z1"]
SIDECAR_COLUMNS = ["voxel_index", "e_pa", "nu", "rho_kgm3"]
SPLAT_COLUMNS = ["mx", "my", "mz", "qw", "qx", "qy", "qz", "sx", "sy", "sz", "opacity"]
POINT_COLUMNS = ["x", "y", "z"]
METRIC_COLUMNS = ["property", "metric", "aggregation", "value"]


def _read(path: Path, columns: Sequence[str]) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"Table {path} does not exist.")
    try:
        frame = pd.read_csv(path, float_precision="round_trip")
    except (pd.errors.ParserError, pd.errors.EmptyDataError, UnicodeDecodeError) as exc:
        raise FormatError(f"Table {path} could not be parsed: {exc}") from exc
    missing = [name for name in columns if name not in frame.columns]
    if missing:
        raise FormatError(f"Table {path} lacks columns {missing}.")
    if frame[list(columns)].isna().to_numpy().any():
        raise FormatError(f"Table {path} has empty cells.")
    return frame


def _write(path: Path, frame: pd.DataFrame) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    # repr-precision floats keep re-runs byte-identical and round trips exact
    frame.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")
    logger.info("Wrote %d rows to %s", len(frame), path)


def read_triplets(path: Path) -> List[MaterialTriplet]:
    frame = _read(path, TRIPLET_COLUMNS)
    try:
        return array_to_triplets(frame[TRIPLET_COLUMNS].to_numpy(dtype=np.float64))
    except (InvalidTripletError, ValueError) as exc:
        raise FormatError(f"Table {path} holds an invalid triplet: {exc}") from exc


def write_triplets(path: Path, triplets: Sequence[MaterialTriplet]) -> None:
    _write(path, pd.DataFrame(triplets_to_array(triplets), columns=TRIPLET_COLUMNS))


def read_latents(path: Path) -> np.ndarray:
    frame = _read(path, LATENT_COLUMNS)
    return frame[LATENT_COLUMNS].to_numpy(dtype=np.float64)


def write_latents(path: Path, latents: np.ndarray) -> None:
    _write(path, pd.DataFrame(np.asarray(latents, dtype=np.float64).reshape(-1, 2), columns=LATENT_COLUMNS))


def read_sidecar(path: Path, count: Optional[int] = None) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Reads per-voxel materials, ordered by voxel index, plus optional object ids."""
    frame = _read(path, SIDECAR_COLUMNS)
    index = frame["voxel_index"].to_numpy()
    count = len(frame) if count is None else count
    if len(frame) != count or sorted(index.tolist()) != list(range(count)):
        raise FormatError(f"Sidecar {path} must list every voxel index 0..{count - 1} exactly once.")
    frame = frame.sort_values("voxel_index", kind="mergesort")
    materials = frame[TRIPLET_COLUMNS].to_numpy(dtype=np.float64)
    try:
        array_to_triplets(materials)
    except InvalidTripletError as exc:
        raise FormatError(f"Sidecar {path} holds an invalid triplet: {exc}") from exc
    object_ids = frame["object_id"].to_numpy() if "object_id" in frame.columns else None
    return materials, object_ids


def write_sidecar(path: Path, materials: np.ndarray, object_ids: Optional[np.ndarray] = None) -> None:
    materials = np.asarray(materials, dtype=np.float64).reshape(-1, 3)
    frame = pd.DataFrame(materials, columns=TRIPLET_COLUMNS)
    frame.insert(0, "voxel_index", np.arange(len(materials)))
    if object_ids is not None:
        frame["object_id"] = np.asarray(object_ids)
    _write(path, frame)


def read_splats(path: Path) -> List[GaussianSplat]:
    frame = _read(path, SPLAT_COLUMNS)
    splats: List[GaussianSplat] = []
    for row_number, row in enumerate(frame[SPLAT_COLUMNS].to_numpy(dtype=np.float64)):
        try:
            splats.append(
                GaussianSplat(
                    mean=(row[0], row[1], row[2]),
                    quaternion=(row[3], row[4], row[5], row[6]),
                    scales=(row[7], row[8], row[9]),
                    opacity=row[10],
                )
            )
        except ValueError as exc:
            raise FormatError(f"Splat row {row_number} in {path} is invalid: {exc}") from exc
    return splats


def write_splats(path: Path, splats: Iterable[GaussianSplat]) -> None:
    rows = [(*s.mean, *s.quaternion, *s.scales, s.opacity) for s in splats]
    _write(path, pd.DataFrame(rows, columns=SPLAT_COLUMNS))


def read_points(path: Path) -> np.ndarray:
    frame = _read(path, POINT_COLUMNS)
    return frame[POINT_COLUMNS].to_numpy(dtype=np.float64)


def write_points(path: Path, points: np.ndarray) -> None:
    _write(path, pd.DataFrame(np.asarray(points, dtype=np.float64).reshape(-1, 3), columns=POINT_COLUMNS))


def metric_frame(rows: Iterable[Tuple[str, str, str, float]]) -> pd.DataFrame:
    return pd.DataFrame(list(rows), columns=METRIC_COLUMNS)


def write_point_materials(path: Path, points: np.ndarray, materials: np.ndarray) -> None:
    values = np.column_stack([np.asarray(points, dtype=np.float64).reshape(-1, 3), np.asarray(materials).reshape(-1, 3)])
    _write(path, pd.DataFrame(values, columns=POINT_COLUMNS + TRIPLET_COLUMNS))
