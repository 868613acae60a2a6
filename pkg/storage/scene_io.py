"""Readers and writers for meshes, cameras, view manifests and lifted features."""

from __future__ import annotations

import json
import logging
from pathlib import Path
from typing import Dict, List, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from models import CameraView, FeatureMap, MeshSegment, SegmentedMesh, VoxelFeatures
from storage.errors import FormatError, StorageError
from storage.voxel_codec import read_feature_map

logger = logging.getLogger(__name__)

DEFAULT_GROUP = "default"


class CameraRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    world_to_camera: List[float] = Field(min_length=16, max_length=16)
    fov_y_deg: float
    width: int = Field(gt=0)
    height: int = Field(gt=0)

    def to_view(self) -> CameraView:
        return CameraView.from_dict(self.model_dump())


class ViewEntry(BaseModel):
    model_config = ConfigDict(extra="forbid")

    camera: CameraRecord
    feature_map: str


def _require(path: Path) -> Path:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"File {path} does not exist.")
    return path


def _vertex_index(token: str, count: int, path: Path, line_no: int) -> int:
    head = token.split("/")[0]
    try:
        value = int(head)
    except ValueError as exc:
        raise FormatError(f"{path}:{line_no}: bad face index {token!r}.") from exc
    if value == 0:
        raise FormatError(f"{path}:{line_no}: face indices are 1-based.")
    index = value - 1 if value > 0 else count + value
    if not 0 <= index < count:
        raise FormatError(f"{path}:{line_no}: face index {value} refers to a missing vertex.")
    return index


def read_obj(path: Path) -> SegmentedMesh:
    """OBJ subset: ``v``, ``f`` and ``g``; each group becomes one segment."""
    path = _require(path)
    vertices: List[Tuple[float, float, float]] = []
    groups: Dict[str, List[Tuple[int, ...]]] = {}
    current = DEFAULT_GROUP
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            parts = line.split("#", 1)[0].split()
            if not parts:
                continue
            keyword, args = parts[0], parts[1:]
            if keyword == "v":
                if len(args) < 3:
                    raise FormatError(f"{path}:{line_no}: vertex needs three coordinates.")
                try:
                    vertices.append((float(args[0]), float(args[1]), float(args[2])))
                except ValueError as exc:
                    raise FormatError(f"{path}:{line_no}: bad vertex coordinate.") from exc
            elif keyword == "g":
                current = " ".join(args) if args else DEFAULT_GROUP
            elif keyword == "f":
                if len(args) < 3:
                    raise FormatError(f"{path}:{line_no}: face needs at least three vertices.")
                face = tuple(_vertex_index(token, len(vertices), path, line_no) for token in args)
                groups.setdefault(current, []).append(face)
    segments = [MeshSegment(segment_id=name, faces=faces) for name, faces in groups.items()]
    try:
        mesh = SegmentedMesh(vertices=np.array(vertices, dtype=np.float64).reshape(-1, 3), segments=segments)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    logger.info("Read %s: %d vertices, %d segments", path, len(vertices), len(segments))
    return mesh


def write_obj(path: Path, mesh: SegmentedMesh) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    for segment in mesh.segments:
        lines.append(f"g {segment.segment_id}")
        lines.extend("f " + " ".join(str(i + 1) for i in face) for face in segment.faces)
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def read_camera(path: Path) -> CameraView:
    path = _require(path)
    try:
        record = CameraRecord.model_validate_json(path.read_text(encoding="utf-8"))
        return record.to_view()
    except (ValidationError, ValueError) as exc:
        raise FormatError(f"Camera file {path} is invalid: {exc}") from exc


def write_camera(path: Path, view: CameraView) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(view.to_dict()), encoding="utf-8")


def read_view_manifest(path: Path) -> List[Tuple[CameraView, FeatureMap]]:
    """Loads every (camera, feature map) pair; map paths are relative to the manifest."""
    path = _require(path)
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
        if not isinstance(raw, list):
            raise FormatError(f"View manifest {path} must hold a JSON list.")
        entries = [ViewEntry.model_validate(item) for item in raw]
        views = [(entry.camera.to_view(), entry) for entry in entries]
    except (json.JSONDecodeError, ValidationError, ValueError) as exc:
        raise FormatError(f"View manifest {path} is invalid: {exc}") from exc
    pairs = [(view, read_feature_map(path.parent / entry.feature_map)) for view, entry in views]
    logger.info("Read %d views from %s", len(pairs), path)
    return pairs


def write_features(path: Path, features: VoxelFeatures) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        np.savez(fh, features=features.features.astype(np.float64), visible=features.visible.astype(bool))
    logger.info("Wrote %d feature rows to %s", len(features), path)


def read_features(path: Path) -> VoxelFeatures:
    path = _require(path)
    try:
        with np.load(path, allow_pickle=False) as archive:
            features = np.asarray(archive["features"], dtype=np.float64)
            visible = np.asarray(archive["visible"], dtype=bool)
    except (KeyError, ValueError, OSError) as exc:
        raise FormatError(f"Feature archive {path} is invalid: {exc}") from exc
    if features.ndim != 2 or visible.shape != (len(features),):
        raise FormatError(f"Feature archive {path} has mismatched shapes {features.shape} and {visible.shape}.")
    return VoxelFeatures(features=features, visible=visible)
