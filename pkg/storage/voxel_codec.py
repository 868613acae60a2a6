"""Little-endian binary codecs for voxel sets (``VOXF``) and feature maps (``VFMP``)."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import List, Optional

import numpy as np

from models import FeatureMap, SolidVoxelization
from storage.errors import FormatError, StorageError

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
VOXEL_MAGIC = b"VOXF"
FEATURE_MAGIC = b"VFMP"
NO_SEGMENT = 0xFFFFFFFF

VOXEL_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("r", "<u4"), ("count", "<u4")])
VOXEL_RECORD = np.dtype([("index", "<u2", (3,)), ("center", "<f4", (3,)), ("segment", "<u4")])
FEATURE_HEADER = np.dtype([("magic", "S4"), ("version", "<u4"), ("n", "<u4"), ("c", "<u4")])
U32 = np.dtype("<u4")


def _read_bytes(path: Path) -> bytes:
    path = Path(path)
    if not path.exists():
        raise StorageError(f"File {path} does not exist.")
    return path.read_bytes()


def _header(raw: bytes, dtype: np.dtype, magic: bytes, path: Path) -> np.void:
    if len(raw) < dtype.itemsize:
        raise FormatError(f"{path} is too short for a {magic.decode()} header.")
    header = np.frombuffer(raw, dtype=dtype, count=1)[0]
    if header["magic"] != magic:
        raise FormatError(f"{path} does not start with {magic.decode()}.")
    if int(header["version"]) != FORMAT_VERSION:
        raise FormatError(f"{path} has unsupported version {int(header['version'])}.")
    return header


def encode_voxels(voxels: SolidVoxelization) -> bytes:
    r = voxels.resolution
    if r > np.iinfo(np.uint16).max:
        raise StorageError(f"Resolution {r} does not fit 16-bit voxel indices.")
    centers = np.asarray(voxels.centers, dtype=np.float64).reshape(-1, 3)
    indices = voxels.indices
    if indices is None:
        indices = np.clip(np.floor((centers + 0.5) * r), 0, r - 1)

    table: List[str] = []
    segment = np.full(len(centers), NO_SEGMENT, dtype=np.uint32)
    if voxels.segment_ids is not None:
        lookup = {}
        for row, name in enumerate(voxels.segment_ids):
            if name not in lookup:
                lookup[name] = len(table)
                table.append(name)
            segment[row] = lookup[name]

    header = np.array([(VOXEL_MAGIC, FORMAT_VERSION, r, len(centers))], dtype=VOXEL_HEADER)
    records = np.zeros(len(centers), dtype=VOXEL_RECORD)
    records["index"] = np.asarray(indices, dtype=np.uint16)
    records["center"] = centers.astype(np.float32)
    records["segment"] = segment
    chunks = [header.tobytes(), records.tobytes(), np.array([len(table)], dtype=U32).tobytes()]
    for name in table:
        encoded = name.encode("utf-8")
        chunks.append(np.array([len(encoded)], dtype=U32).tobytes())
        chunks.append(encoded)
    return b"".join(chunks)


def decode_voxels(raw: bytes, path: Path = Path("<bytes>")) -> SolidVoxelization:
    header = _header(raw, VOXEL_HEADER, VOXEL_MAGIC, path)
    r = int(header["r"])
    count = int(header["count"])
    offset = VOXEL_HEADER.itemsize
    end = offset + count * VOXEL_RECORD.itemsize
    if len(raw) < end + U32.itemsize:
        raise FormatError(f"{path} is truncated: expected {count} voxel records.")
    records = np.frombuffer(raw, dtype=VOXEL_RECORD, count=count, offset=offset)

    table: List[str] = []
    (entries,) = np.frombuffer(raw, dtype=U32, count=1, offset=end)
    cursor = end + U32.itemsize
    for _ in range(int(entries)):
        if len(raw) < cursor + U32.itemsize:
            raise FormatError(f"{path} has a truncated segment table.")
        (length,) = np.frombuffer(raw, dtype=U32, count=1, offset=cursor)
        cursor += U32.itemsize
        chunk = raw[cursor : cursor + int(length)]
        if len(chunk) != int(length):
            raise FormatError(f"{path} has a truncated segment name.")
        table.append(chunk.decode("utf-8"))
        cursor += int(length)

    segment_ids: Optional[List[str]] = None
    if table:
        slots = records["segment"]
        if np.any(slots >= len(table)):
            raise FormatError(f"{path} references a segment outside its string table.")
        segment_ids = [table[int(slot)] for slot in slots]
    indices = records["index"].astype(np.int64)
    return SolidVoxelization(
        resolution=r,
        centers=records["center"].astype(np.float64),
        segment_ids=segment_ids,
        discretized=indices / r - 0.5,
        indices=indices,
    )


def write_voxels(path: Path, voxels: SolidVoxelization) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_voxels(voxels))
    logger.info("Wrote %d voxels to %s", len(voxels), path)


def read_voxels(path: Path) -> SolidVoxelization:
    path = Path(path)
    return decode_voxels(_read_bytes(path), path)


def write_feature_map(path: Path, feature_map: FeatureMap) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = np.array([(FEATURE_MAGIC, FORMAT_VERSION, feature_map.n, feature_map.c)], dtype=FEATURE_HEADER)
    body = np.ascontiguousarray(feature_map.data, dtype="<f4")
    path.write_bytes(header.tobytes() + body.tobytes())
    logger.info("Wrote %dx%dx%d feature map to %s", feature_map.n, feature_map.n, feature_map.c, path)


def read_feature_map(path: Path) -> FeatureMap:
    path = Path(path)
    raw = _read_bytes(path)
    header = _header(raw, FEATURE_HEADER, FEATURE_MAGIC, path)
    n = int(header["n"])
    c = int(header["c"])
    expected = FEATURE_HEADER.itemsize + n * n * c * 4
    if len(raw) != expected:
        raise FormatError(f"{path} holds {len(raw)} bytes, expected {expected} for a {n}x{n}x{c} map.")
    data = np.frombuffer(raw, dtype="<f4", offset=FEATURE_HEADER.itemsize).reshape(n, n, c)
    try:
        return FeatureMap(data=data.astype(np.float64))
    except ValueError as exc:
        raise FormatError(f"{path} holds an invalid feature map: {exc}") from exc
