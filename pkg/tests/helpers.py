"""Mesh and splat builders plus the winding-number oracle shared by the tests."""

from __future__ import annotations

import math
from typing import List, Tuple

import numpy as np

from models import GaussianSplat, MeshSegment, SegmentedMesh
from services.voxel_service import fan_triangulate

Faces = List[Tuple[int, ...]]


def box_mesh(lo=(-0.25, -0.25, -0.25), hi=(0.25, 0.25, 0.25), offset: int = 0) -> Tuple[np.ndarray, Faces]:
    (x0, y0, z0), (x1, y1, z1) = lo, hi
    vertices = np.array(
        [
            [x0, y0, z0], [x1, y0, z0], [x1, y1, z0], [x0, y1, z0],
            [x0, y0, z1], [x1, y0, z1], [x1, y1, z1], [x0, y1, z1],
        ]
    )
    quads = [(0, 3, 2, 1), (4, 5, 6, 7), (0, 1, 5, 4), (2, 3, 7, 6), (1, 2, 6, 5), (0, 4, 7, 3)]
    return vertices, [tuple(i + offset for i in quad) for quad in quads]


def icosphere(subdivisions: int = 3, radius: float = 0.25) -> Tuple[np.ndarray, Faces]:
    t = (1.0 + math.sqrt(5.0)) / 2.0
    vertices = [
        (-1, t, 0), (1, t, 0), (-1, -t, 0), (1, -t, 0),
        (0, -1, t), (0, 1, t), (0, -1, -t), (0, 1, -t),
        (t, 0, -1), (t, 0, 1), (-t, 0, -1), (-t, 0, 1),
    ]
    points = [np.array(v, dtype=np.float64) / np.linalg.norm(v) for v in vertices]
    faces = [
        (0, 11, 5), (0, 5, 1), (0, 1, 7), (0, 7, 10), (0, 10, 11),
        (1, 5, 9), (5, 11, 4), (11, 10, 2), (10, 7, 6), (7, 1, 8),
        (3, 9, 4), (3, 4, 2), (3, 2, 6), (3, 6, 8), (3, 8, 9),
        (4, 9, 5), (2, 4, 11), (6, 2, 10), (8, 6, 7), (9, 8, 1),
    ]
    for _ in range(subdivisions):
        cache = {}

        def midpoint(a: int, b: int) -> int:
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = points[a] + points[b]
                points.append(m / np.linalg.norm(m))
                cache[key] = len(points) - 1
            return cache[key]

        refined = []
        for a, b, c in faces:
            ab, bc, ca = midpoint(a, b), midpoint(b, c), midpoint(c, a)
            refined += [(a, ab, ca), (b, bc, ab), (c, ca, bc), (ab, bc, ca)]
        faces = refined
    return np.array(points) * radius, faces


def torus(major: float = 0.25, minor: float = 0.1, rings: int = 24, sides: int = 12) -> Tuple[np.ndarray, Faces]:
    vertices = []
    for i in range(rings):
        theta = 2.0 * math.pi * i / rings
        for j in range(sides):
            phi = 2.0 * math.pi * j / sides
            ring = major + minor * math.cos(phi)
            vertices.append((ring * math.cos(theta), ring * math.sin(theta), minor * math.sin(phi)))
    faces = []
    for i in range(rings):
        for j in range(sides):
            a = i * sides + j
            b = ((i + 1) % rings) * sides + j
            c = ((i + 1) % rings) * sides + (j + 1) % sides
            d = i * sides + (j + 1) % sides
            faces.append((a, b, c, d))
    return np.array(vertices), faces


def l_bracket(size: float = 0.4, depth: float = 0.2) -> Tuple[np.ndarray, Faces]:
    """L-shaped prism; caps start at the reflex corner so fan triangulation stays inside."""
    s = size
    outline = [(s / 2, s / 2), (s / 2, s), (0.0, s), (0.0, 0.0), (s, 0.0), (s, s / 2)]
    outline = [(x - s / 2, y - s / 2) for x, y in outline]
    bottom = [(x, y, -depth / 2) for x, y in outline]
    top = [(x, y, depth / 2) for x, y in outline]
    vertices = np.array(bottom + top)
    n = len(outline)
    # bottom cap reversed; both caps start at the reflex corner
    faces: Faces = [(0,) + tuple(range(n - 1, 0, -1)), tuple(range(n, 2 * n))]
    for i in range(n):
        j = (i + 1) % n
        faces.append((i, j, n + j, n + i))
    return vertices, faces


def two_cubes() -> SegmentedMesh:
    left_v, left_f = box_mesh((-0.5, -0.2, -0.2), (-0.1, 0.2, 0.2))
    right_v, right_f = box_mesh((0.1, -0.2, -0.2), (0.5, 0.2, 0.2), offset=8)
    return SegmentedMesh(
        vertices=np.vstack([left_v, right_v]),
        segments=[MeshSegment("left", left_f), MeshSegment("right", right_f)],
    )


def winding_numbers(points: np.ndarray, vertices: np.ndarray, faces: Faces, chunk: int = 256) -> np.ndarray:
    """Generalized winding number of a closed triangle mesh at each point."""
    triangles = vertices[fan_triangulate(faces)]
    result = np.zeros(len(points))
    for start in range(0, len(points), chunk):
        p = points[start : start + chunk]
        a = triangles[None, :, 0, :] - p[:, None, :]
        b = triangles[None, :, 1, :] - p[:, None, :]
        c = triangles[None, :, 2, :] - p[:, None, :]
        la, lb, lc = (np.linalg.norm(x, axis=2) for x in (a, b, c))
        det = np.einsum("pti,pti->pt", a, np.cross(b, c))
        denom = (
            la * lb * lc
            + np.einsum("pti,pti->pt", a, b) * lc
            + np.einsum("pti,pti->pt", b, c) * la
            + np.einsum("pti,pti->pt", c, a) * lb
        )
        result[start : start + chunk] = np.sum(2.0 * np.arctan2(det, denom), axis=1) / (4.0 * math.pi)
    return result


def isotropic_splat(mean=(0.0, 0.0, 0.0), scale: float = 0.1) -> GaussianSplat:
    return GaussianSplat(mean=tuple(mean), quaternion=(1.0, 0.0, 0.0, 0.0), scales=(scale, scale, scale))

