"""Solid voxelization of segmented meshes and Gaussian splat sets."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import ndimage

from models import (
    CHI2_3_Q99,
    CameraView,
    GaussianSplat,
    OccupancyGrid,
    SegmentedMesh,
    SolidVoxelization,
    VoxelGrid,
)
from services import feature_service

logger = logging.getLogger(__name__)

NORMALIZE_EPS = 1e-6
MIN_SPLAT_SCALE = 1e-9
DEFAULT_SPLAT_PADDING = 3.0
DEFAULT_VIEW_COUNT = 64
CAMERA_RADIUS = 2.0
CAMERA_FOV_Y_DEG = 40.0


class VoxelServiceError(Exception):
    """Base error for voxelization."""


class EmptyMeshError(VoxelServiceError):
    pass


class ZeroScaleError(VoxelServiceError):
    pass


class DegenerateSplatError(VoxelServiceError):
    pass


# --- triangle / box overlap ---------------------------------------------


def triangle_boxes_intersect(tri: np.ndarray, centers: np.ndarray, half: np.ndarray) -> np.ndarray:
    """Separating-axis overlap of one closed triangle against many closed axis-aligned boxes.

    ``centers`` is (K, 3) and ``half`` the shared half extents; returns a (K,) mask.
    """
    tri = np.asarray(tri, dtype=np.float64).reshape(3, 3)
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    half = np.broadcast_to(np.asarray(half, dtype=np.float64), (3,))
    v = tri[None, :, :] - centers[:, None, :]
    keep = np.ones(len(centers), dtype=bool)

    # box face normals
    keep &= ~np.any((v.min(axis=1) > half) | (v.max(axis=1) < -half), axis=1)

    edges = np.array([tri[1] - tri[0], tri[2] - tri[1], tri[0] - tri[2]])
    axes = [np.cross(edges[0], edges[1])]
    axes += [np.cross(np.eye(3)[i], edge) for i in range(3) for edge in edges]
    for axis in axes:
        projected = v @ axis
        radius = float(np.dot(half, np.abs(axis)))
        keep &= ~((projected.min(axis=1) > radius) | (projected.max(axis=1) < -radius))
    return keep


def triangle_box_intersect(tri: np.ndarray, box_min: Sequence[float], box_max: Sequence[float]) -> bool:
    box_min = np.asarray(box_min, dtype=np.float64)
    box_max = np.asarray(box_max, dtype=np.float64)
    if np.any(box_max <= box_min):
        raise ValueError("Box extents must be positive.")
    center = 0.5 * (box_min + box_max)
    return bool(triangle_boxes_intersect(tri, center[None, :], 0.5 * (box_max - box_min))[0])


# --- meshes ---------------------------------------------------------------


def fan_triangulate(faces: Sequence[Sequence[int]]) -> np.ndarray:
    triangles = [(face[0], face[k], face[k + 1]) for face in faces for k in range(1, len(face) - 1)]
    return np.array(triangles, dtype=np.int64).reshape(-1, 3)


def voxelize_solid(vertices: np.ndarray, faces: np.ndarray, r: int) -> Tuple[np.ndarray, VoxelGrid]:
    """Surface rasterization plus 6-connected exterior flood fill at pitch 1/r."""
    faces = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(faces) == 0:
        raise EmptyMeshError("Cannot voxelize a mesh without faces.")
    if r < 1:
        raise ValueError(f"Resolution must be positive, got {r}.")
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if not np.all(np.isfinite(vertices)):
        raise VoxelServiceError("Mesh vertices must be finite.")
    h = 1.0 / r
    used = vertices[np.unique(faces)]
    origin = used.min(axis=0) - h
    top = used.max(axis=0) + h
    dims = np.maximum(np.ceil((top - origin) / h - 1e-9).astype(np.int64), 1)
    surface = np.zeros(tuple(dims), dtype=bool)
    half = np.full(3, 0.5 * h)

    for tri in vertices[faces]:
        lo = np.clip(np.floor((tri.min(axis=0) - origin) / h).astype(np.int64), 0, dims - 1)
        hi = np.clip(np.floor((tri.max(axis=0) - origin) / h).astype(np.int64), 0, dims - 1)
        block = np.stack(
            np.meshgrid(*(np.arange(lo[a], hi[a] + 1) for a in range(3)), indexing="ij"), axis=-1
        ).reshape(-1, 3)
        hits = triangle_boxes_intersect(tri, origin + (block + 0.5) * h, half)
        surface[tuple(block[hits].T)] = True

    labels, _ = ndimage.label(~surface)
    border = np.concatenate(
        [
            labels[0].ravel(), labels[-1].ravel(),
            labels[:, 0].ravel(), labels[:, -1].ravel(),
            labels[:, :, 0].ravel(), labels[:, :, -1].ravel(),
        ]
    )
    exterior = np.isin(labels, np.unique(border[border > 0]))
    interior = ~exterior & ~surface
    if not interior.any() and surface.any():
        logger.warning("Mesh encloses no interior cells at r=%d; it may not be watertight", r)
    centers = origin + (np.argwhere(interior) + 0.5) * h
    grid = VoxelGrid(resolution=r, origin=origin, surface=surface, exterior=exterior, interior=interior)
    return centers, grid


def normalize_vertices(vertices: np.ndarray) -> Tuple[np.ndarray, np.ndarray, float]:
    """Centers the AABB at the origin, scales its largest side to 1 and clips inside the unit cube."""
    vertices = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    if len(vertices) == 0:
        raise EmptyMeshError("Mesh has no vertices.")
    lo = vertices.min(axis=0)
    hi = vertices.max(axis=0)
    center = 0.5 * (lo + hi)
    scale = float(np.max(hi - lo))
    if scale <= 0.0:
        raise ZeroScaleError("zero scale: mesh has zero extent.")
    normalized = np.clip((vertices - center) / scale, -0.5 + NORMALIZE_EPS, 0.5 - NORMALIZE_EPS)
    return normalized, center, scale


def discretize(centers: np.ndarray, r: int) -> Tuple[np.ndarray, np.ndarray]:
    """Snaps points in [-0.5, 0.5]^3 to the r^3 lattice; returns (snapped, integer indices)."""
    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    # tolerance keeps discretize(discretize(c)) == discretize(c) under round-off
    indices = np.clip(np.floor((centers + 0.5) * r + 1e-9), 0, r - 1).astype(np.int64)
    return indices / r - 0.5, indices


def _subsample(count: int, cap: Optional[int], rng: Optional[np.random.Generator]) -> np.ndarray:
    if cap is None or count <= cap:
        return np.arange(count)
    return np.sort(rng.choice(count, size=cap, replace=False))


def voxelize_segmented(
    mesh: SegmentedMesh,
    r: int,
    k_seg: Optional[int] = None,
    k_all: Optional[int] = None,
    seed: Optional[int] = None,
) -> SolidVoxelization:
    if not mesh.segments or not mesh.all_faces():
        raise EmptyMeshError("Segmented mesh has no faces.")
    if (k_seg is not None or k_all is not None) and seed is None:
        raise ValueError("A seed is required when subsampling caps are given.")
    rng = np.random.default_rng(seed) if seed is not None else None
    vertices, _, _ = normalize_vertices(mesh.vertices)

    centers: List[np.ndarray] = []
    ids: List[str] = []
    for segment in mesh.segments:
        triangles = fan_triangulate(segment.faces)
        if len(triangles) == 0:
            logger.warning("Segment %s has no faces and is skipped", segment.segment_id)
            continue
        solid, _ = voxelize_solid(vertices, triangles, r)
        solid = solid[_subsample(len(solid), k_seg, rng)]
        if len(solid) == 0:
            logger.warning("Segment %s produced no interior voxels", segment.segment_id)
        centers.append(solid)
        ids.extend([segment.segment_id] * len(solid))

    stacked = np.concatenate(centers, axis=0) if centers else np.zeros((0, 3))
    keep = _subsample(len(stacked), k_all, rng)
    stacked = stacked[keep]
    ids = [ids[i] for i in keep]
    snapped, indices = discretize(stacked, r)
    logger.info("Voxelized %d segments into %d solid voxels at r=%d", len(mesh.segments), len(stacked), r)
    return SolidVoxelization(resolution=r, centers=stacked, segment_ids=ids, discretized=snapped, indices=indices)


# --- splats ---------------------------------------------------------------


@dataclass(frozen=True)
class SplatFrame:
    """Similarity transform mapping splat space into the unit cube."""

    center: np.ndarray
    scale: float

    def to_unit(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.center) / self.scale


def splat_frame(splats: Sequence[GaussianSplat], padding: float = DEFAULT_SPLAT_PADDING) -> SplatFrame:
    if not splats:
        raise VoxelServiceError("At least one splat is required.")
    means = np.array([s.mean for s in splats], dtype=np.float64)
    reach = padding * max(max(s.scales) for s in splats)
    lo = means.min(axis=0) - reach
    hi = means.max(axis=0) + reach
    return SplatFrame(center=0.5 * (lo + hi), scale=float(np.max(hi - lo)))


def splat_covariance(splat: GaussianSplat, scale_multiplier: float = 1.0) -> np.ndarray:
    rotation = splat.rotation()
    return rotation @ np.diag((np.asarray(splat.scales) * scale_multiplier) ** 2) @ rotation.T


def _check_scales(splats: Sequence[GaussianSplat]) -> None:
    for index, splat in enumerate(splats):
        if min(splat.scales) < MIN_SPLAT_SCALE:
            raise DegenerateSplatError(f"Splat {index} has a scale below {MIN_SPLAT_SCALE}: covariance is singular.")


def ellipsoid_membership(
    splats: Sequence[GaussianSplat], points: np.ndarray, threshold: float = CHI2_3_Q99
) -> np.ndarray:
    """True where a point lies inside some splat's Mahalanobis ellipsoid of the given squared radius."""
    _check_scales(splats)
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    inside = np.zeros(len(points), dtype=bool)
    for splat in splats:
        rotation = splat.rotation()
        local = (points - np.asarray(splat.mean)) @ rotation / np.asarray(splat.scales)
        inside |= np.sum(local * local, axis=1) <= threshold
    return inside


def splat_to_occupancy(
    splats: Sequence[GaussianSplat],
    r: int,
    padding: float = DEFAULT_SPLAT_PADDING,
    threshold: float = CHI2_3_Q99,
) -> OccupancyGrid:
    """Marks lattice cells whose centers fall inside any splat's 99th-percentile ellipsoid.

    Opacity plays no part: a faint splat occupies the same cells as an opaque one.
    """
    frame = splat_frame(splats, padding)
    _check_scales(splats)
    occupied = np.zeros((r, r, r), dtype=bool)
    for splat in splats:
        mean = frame.to_unit(np.asarray(splat.mean))
        rotation = splat.rotation()
        scales = np.asarray(splat.scales) / frame.scale
        covariance = rotation @ np.diag(scales**2) @ rotation.T
        reach = np.sqrt(threshold * np.diag(covariance))
        lo = np.clip(np.floor((mean - reach + 0.5) * r).astype(np.int64), 0, r - 1)
        hi = np.clip(np.floor((mean + reach + 0.5) * r).astype(np.int64), 0, r - 1)
        block = np.stack(
            np.meshgrid(*(np.arange(lo[a], hi[a] + 1) for a in range(3)), indexing="ij"), axis=-1
        ).reshape(-1, 3)
        local = ((block + 0.5) / r - 0.5 - mean) @ rotation / scales
        hits = np.sum(local * local, axis=1) <= threshold
        occupied[tuple(block[hits].T)] = True
    logger.info("Splat occupancy: %d of %d cells from %d splats", int(occupied.sum()), r**3, len(splats))
    return OccupancyGrid(occupied=occupied)


def fibonacci_cameras(
    count: int,
    radius: float = CAMERA_RADIUS,
    fov_y_deg: float = CAMERA_FOV_Y_DEG,
    size: int = 256,
) -> List[CameraView]:
    """Cameras spread evenly on a sphere, all looking at the origin."""
    if count < 1:
        raise ValueError(f"Camera count must be at least 1, got {count}.")
    golden = math.pi * (3.0 - math.sqrt(5.0))
    views = []
    for i in range(count):
        y = 1.0 - 2.0 * (i + 0.5) / count
        ring = math.sqrt(max(0.0, 1.0 - y * y))
        theta = golden * i
        eye = radius * np.array([math.cos(theta) * ring, y, math.sin(theta) * ring])
        views.append(CameraView(world_to_camera=feature_service.look_at(eye), fov_y_deg=fov_y_deg, width=size, height=size))
    return views


def render_depth(occupancy: OccupancyGrid, view: CameraView) -> np.ndarray:
    """Camera-space depth of the front-most surface per pixel, ``inf`` where rays miss.

    Rays run through pixel centers and step through the lattice cell by cell; the surface
    is where a ray enters its first occupied cell.
    """
    r = occupancy.resolution
    h = 1.0 / r
    tan_x, tan_y = feature_service.half_fov_tangents(view)
    cols = (np.arange(view.width) + 0.5) / view.width * 2.0 - 1.0
    rows = (np.arange(view.height) + 0.5) / view.height * 2.0 - 1.0
    uu, vv = np.meshgrid(cols, rows)
    cam_dirs = np.stack([uu.ravel() * tan_x, vv.ravel() * tan_y, np.ones(uu.size)], axis=1)
    # unit camera-z component makes the ray parameter equal to depth
    dirs = cam_dirs @ view.rotation
    origin = view.eye
    depth = np.full(len(dirs), np.inf)

    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        t1 = (-0.5 - origin) * inv
        t2 = (0.5 - origin) * inv
    t_near = np.nanmax(np.minimum(t1, t2), axis=1)
    t_far = np.nanmin(np.maximum(t1, t2), axis=1)
    t_start = np.maximum(t_near, 0.0)
    rays = np.nonzero(t_far >= t_start)[0]
    if len(rays) == 0:
        return depth.reshape(view.height, view.width)

    d = dirs[rays]
    t_cur = t_start[rays]
    entry = origin + d * t_cur[:, None]
    cell = np.clip(np.floor((entry + 0.5) / h), 0, r - 1).astype(np.int64)
    step = np.sign(d).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        boundary = (cell + (step > 0)) * h - 0.5
        t_next = np.where(d != 0, (boundary - origin) / d, np.inf)
        t_delta = np.where(d != 0, h / np.abs(d), np.inf)

    for _ in range(3 * r + 3):
        inside = np.all((cell >= 0) & (cell < r), axis=1)
        hit = np.zeros(len(rays), dtype=bool)
        hit[inside] = occupancy.occupied[tuple(cell[inside].T)]
        depth[rays[hit]] = t_cur[hit]
        alive = inside & ~hit
        if not alive.any():
            break
        rays, d, t_cur, cell, step, t_next, t_delta = (
            a[alive] for a in (rays, d, t_cur, cell, step, t_next, t_delta)
        )
        axis = np.argmin(t_next, axis=1)
        rows_idx = np.arange(len(rays))
        t_cur = t_next[rows_idx, axis]
        cell[rows_idx, axis] += step[rows_idx, axis]
        t_next[rows_idx, axis] += t_delta[rows_idx, axis]
    return depth.reshape(view.height, view.width)


def _lattice_voxels(indices: np.ndarray, r: int) -> SolidVoxelization:
    centers = (indices + 0.5) / r - 0.5
    return SolidVoxelization(resolution=r, centers=centers, discretized=indices / r - 0.5, indices=indices)


def occupancy_to_voxels(occupancy: OccupancyGrid) -> SolidVoxelization:
    return _lattice_voxels(np.argwhere(occupancy.occupied), occupancy.resolution)


def carve_exterior(occupancy: OccupancyGrid, views: Sequence[CameraView]) -> SolidVoxelization:
    """Carves observed free space out of the full lattice.

    Every cell starts solid. An empty cell goes when some view sees its center in front of
    that view's surface; an occupied cell would have to lie more than h/2 in front, which
    a front-most-cell depth map never allows. Cells no view can see, such as the inside of
    a closed shell, survive. Without views the occupancy is returned unchanged.
    """
    if not views:
        return occupancy_to_voxels(occupancy)
    r = occupancy.resolution
    h = occupancy.pitch
    indices = np.argwhere(np.ones((r, r, r), dtype=bool))
    centers = (indices + 0.5) * h - 0.5
    tolerance = np.where(occupancy.occupied[tuple(indices.T)], 0.5 * h, 0.0)
    carved = np.zeros(len(centers), dtype=bool)
    for view in views:
        depth = render_depth(occupancy, view)
        uv, in_front, z = feature_service.project_points(view, centers)
        col = np.floor((uv[:, 0] + 1.0) * 0.5 * view.width).astype(np.int64)
        row = np.floor((uv[:, 1] + 1.0) * 0.5 * view.height).astype(np.int64)
        judged = in_front & (col >= 0) & (col < view.width) & (row >= 0) & (row < view.height)
        surface = np.full(len(centers), -np.inf)
        surface[judged] = depth[row[judged], col[judged]]
        carved |= judged & (z < surface - tolerance)
    result = _lattice_voxels(indices[~carved], r)
    logger.info(
        "Carving kept %d of %d cells (%d occupied, %d views)",
        len(result), len(centers), int(occupancy.occupied.sum()), len(views),
    )
    return result


def voxelize_splats(
    splats: Sequence[GaussianSplat],
    r: int,
    n_views: int = DEFAULT_VIEW_COUNT,
    pixels_per_cell: int = 4,
    padding: float = DEFAULT_SPLAT_PADDING,
) -> SolidVoxelization:
    if n_views < 1:
        raise ValueError(f"At least one view is required, got {n_views}.")
    occupancy = splat_to_occupancy(splats, r, padding=padding)
    views = fibonacci_cameras(n_views, size=pixels_per_cell * r)
    return carve_exterior(occupancy, views)
