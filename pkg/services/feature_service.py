"""Lifts per-view feature maps onto voxel centers by projection, bilinear sampling and averaging."""

from __future__ import annotations

import hashlib
import logging
import math
from typing import List, Sequence, Tuple

import numpy as np

from models import CameraView, FeatureMap, SolidVoxelization, VoxelFeatures

logger = logging.getLogger(__name__)


class FeatureServiceError(Exception):
    """Base error for feature lifting."""


class ChannelMismatchError(FeatureServiceError):
    pass


def look_at(
    eye: Sequence[float],
    target: Sequence[float] = (0.0, 0.0, 0.0),
    up: Sequence[float] = (0.0, 1.0, 0.0),
) -> np.ndarray:
    """World-to-camera matrix with x right, y down and z along the viewing direction."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - eye
    norm = np.linalg.norm(forward)
    if norm == 0.0:
        raise ValueError("Camera eye and target coincide.")
    forward = forward / norm
    right = np.cross(forward, np.asarray(up, dtype=np.float64))
    if np.linalg.norm(right) < 1e-9:
        right = np.cross(forward, np.array([0.0, 0.0, 1.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    matrix = np.eye(4)
    matrix[:3, :3] = np.stack([right, down, forward])
    matrix[:3, 3] = -matrix[:3, :3] @ eye
    return matrix


def half_fov_tangents(view: CameraView) -> Tuple[float, float]:
    """tan of the horizontal and vertical half angles; square pixels."""
    tan_y = math.tan(math.radians(view.fov_y_deg) / 2.0)
    return tan_y * view.width / view.height, tan_y


def intrinsics_from_fov(view: CameraView) -> Tuple[float, float, float, float]:
    tan_x, tan_y = half_fov_tangents(view)
    fy = view.height / (2.0 * tan_y)
    fx = view.width / (2.0 * tan_x)
    return fx, fy, view.width / 2.0, view.height / 2.0


def project_points(view: CameraView, points: np.ndarray) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Normalized image coordinates, in-front flags and camera depth for (N, 3) world points.

    Image edges map to +-1; points behind the camera get uv = 0.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    cam = points @ view.rotation.T + view.translation
    depth = cam[:, 2]
    in_front = depth > 0.0
    tan_x, tan_y = half_fov_tangents(view)
    safe = np.where(in_front, depth, 1.0)
    uv = np.stack([cam[:, 0] / (safe * tan_x), cam[:, 1] / (safe * tan_y)], axis=1)
    uv[~in_front] = 0.0
    return uv, in_front, depth


def project(view: CameraView, point: Sequence[float]) -> Tuple[np.ndarray, bool]:
    uv, in_front, _ = project_points(view, np.asarray(point, dtype=np.float64)[None, :])
    return uv[0], bool(in_front[0])


def bilinear_sample_many(data: np.ndarray, uv: np.ndarray) -> np.ndarray:
    """Align-corners bilinear lookup of an (n, n, c) grid at (N, 2) coordinates; clamps outside [-1, 1]."""
    n = data.shape[0]
    uv = np.clip(np.asarray(uv, dtype=np.float64).reshape(-1, 2), -1.0, 1.0)
    col = (uv[:, 0] + 1.0) * 0.5 * (n - 1)
    row = (uv[:, 1] + 1.0) * 0.5 * (n - 1)
    c0 = np.minimum(np.floor(col).astype(np.int64), n - 1)
    r0 = np.minimum(np.floor(row).astype(np.int64), n - 1)
    c1 = np.minimum(c0 + 1, n - 1)
    r1 = np.minimum(r0 + 1, n - 1)
    fc = (col - c0)[:, None]
    fr = (row - r0)[:, None]
    # lerp form is exact on lattice points and for constant maps
    top = data[r0, c0] + fc * (data[r0, c1] - data[r0, c0])
    bottom = data[r1, c0] + fc * (data[r1, c1] - data[r1, c0])
    return top + fr * (bottom - top)


def bilinear_sample(feature_map: FeatureMap, uv: Sequence[float]) -> np.ndarray:
    return bilinear_sample_many(feature_map.data, np.asarray(uv, dtype=np.float64)[None, :])[0]


def _view_key(item: Tuple[CameraView, FeatureMap]) -> Tuple:
    view, feature_map = item
    digest = hashlib.sha256(np.ascontiguousarray(feature_map.data).tobytes()).hexdigest()
    return (tuple(view.world_to_camera.ravel().tolist()), view.fov_y_deg, view.width, view.height, digest)


def lift_features(
    voxels: SolidVoxelization, views: Sequence[Tuple[CameraView, FeatureMap]]
) -> VoxelFeatures:
    """Averages the bilinear samples of every view that sees each voxel in front of it."""
    if not views:
        raise FeatureServiceError("At least one view is required to lift features.")
    channels = {feature_map.c for _, feature_map in views}
    if len(channels) != 1:
        raise ChannelMismatchError(f"Feature maps disagree on channel count: {sorted(channels)}.")
    width = channels.pop()
    ordered: List[Tuple[CameraView, FeatureMap]] = sorted(views, key=_view_key)

    centers = np.asarray(voxels.centers, dtype=np.float64).reshape(-1, 3)
    mean = np.zeros((len(centers), width))
    count = np.zeros(len(centers))
    for view, feature_map in ordered:
        uv, in_front, _ = project_points(view, centers)
        if not in_front.any():
            continue
        samples = bilinear_sample_many(feature_map.data, uv[in_front])
        count[in_front] += 1.0
        # running mean keeps constant inputs exact
        mean[in_front] += (samples - mean[in_front]) / count[in_front][:, None]

    visible = count > 0
    if not visible.all():
        logger.warning("%d of %d voxels are in front of no camera", int((~visible).sum()), len(centers))
    logger.info("Lifted %d-channel features from %d views onto %d voxels", width, len(views), len(centers))
    return VoxelFeatures(features=mean, visible=visible)
