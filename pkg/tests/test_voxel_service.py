import math

import numpy as np
import pytest
from scipy import ndimage

from models import CameraView, GaussianSplat, MeshSegment, OccupancyGrid, SegmentedMesh
from services import feature_service, voxel_service
from services.voxel_service import fan_triangulate
from tests.helpers import box_mesh, icosphere, isotropic_splat, l_bracket, torus, two_cubes, winding_numbers


def _index_set(indices):
    return {tuple(int(v) for v in row) for row in indices}


def _mesh_volume(vertices, faces):
    tri = vertices[fan_triangulate(faces)]
    return abs(float(np.einsum("ti,ti->t", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()) / 6.0)


# --- triangle / box overlap ---------------------------------------------


def test_triangle_inside_box():
    tri = np.array([[0.1, 0.1, 0.1], [0.2, 0.1, 0.1], [0.1, 0.2, 0.15]])
    assert voxel_service.triangle_box_intersect(tri, (0, 0, 0), (1, 1, 1))


def test_parallel_triangle_outside_box():
    tri = np.array([[0.0, 0.0, 1.001], [1.0, 0.0, 1.001], [0.0, 1.0, 1.001]])
    assert not voxel_service.triangle_box_intersect(tri, (0, 0, 0), (1, 1, 1))


def test_triangle_touching_a_face_counts():
    tri = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 1.0], [0.0, 1.0, 1.0]])
    assert voxel_service.triangle_box_intersect(tri, (0, 0, 0), (1, 1, 1))


def test_degenerate_triangle_is_allowed():
    point = np.tile([0.5, 0.5, 0.5], (3, 1))
    assert voxel_service.triangle_box_intersect(point, (0, 0, 0), (1, 1, 1))
    assert not voxel_service.triangle_box_intersect(point + 2.0, (0, 0, 0), (1, 1, 1))


def test_box_needs_positive_extent():
    tri = np.eye(3)
    with pytest.raises(ValueError):
        voxel_service.triangle_box_intersect(tri, (0, 0, 0), (1, 0, 1))


def test_overlap_never_misses_a_sampled_contact():
    rng = np.random.default_rng(0)
    a = rng.random((1000, 1))
    b = rng.random((1000, 1))
    flip = a + b > 1.0
    a, b = np.where(flip, 1.0 - a, a), np.where(flip, 1.0 - b, b)
    for _ in range(2000):
        tri = rng.uniform(-1.0, 2.0, size=(3, 3))
        lo = rng.uniform(-0.5, 1.0, size=3)
        hi = lo + rng.uniform(0.05, 1.0, size=3)
        samples = tri[0] + a * (tri[1] - tri[0]) + b * (tri[2] - tri[0])
        touched = np.any(np.all((samples >= lo) & (samples <= hi), axis=1))
        if touched:
            assert voxel_service.triangle_box_intersect(tri, lo, hi)


# --- solid mesh voxelization ----------------------------------------------


def _two_cubes_solid():
    mesh = two_cubes()
    return mesh.vertices, [face for segment in mesh.segments for face in segment.faces]


def _shape(name):
    if name == "two_cubes":
        return _two_cubes_solid()
    return {
        "cube": box_mesh(),
        "icosphere": icosphere(),
        "torus": torus(),
        "bracket": l_bracket(),
    }[name]


@pytest.mark.parametrize("name,r", [("cube", 16), ("icosphere", 24), ("torus", 24), ("bracket", 24), ("two_cubes", 16)])
def test_solid_matches_winding_number_oracle(name, r):
    vertices, faces = _shape(name)
    centers, grid = voxel_service.voxelize_solid(vertices, fan_triangulate(faces), r)

    assert not np.any(grid.interior & grid.exterior)
    assert not np.any(grid.interior & grid.surface)
    np.testing.assert_array_equal(grid.interior, ~grid.exterior & ~grid.surface)
    assert grid.interior.any()

    idx = np.argwhere(np.ones(grid.shape, dtype=bool))
    points = grid.origin + (idx + 0.5) * grid.pitch
    inside = np.abs(winding_numbers(points, vertices, faces)) > 0.5
    free = ~grid.surface[tuple(idx.T)]
    np.testing.assert_array_equal(grid.interior[tuple(idx.T)][free], inside[free])

    expected = grid.origin + (np.argwhere(grid.interior) + 0.5) * grid.pitch
    np.testing.assert_allclose(centers, expected, atol=1e-12)


def test_icosphere_volume():
    vertices, faces = icosphere()
    r = 32
    _, grid = voxel_service.voxelize_solid(vertices, fan_triangulate(faces), r)
    cell = grid.pitch**3
    interior = int(grid.interior.sum())
    surface = int(grid.surface.sum())
    volume = _mesh_volume(vertices, faces)
    assert interior * cell <= volume <= (interior + surface) * cell
    estimate = (interior + surface / 2.0) * cell
    assert estimate == pytest.approx(4.0 / 3.0 * math.pi * 0.25**3, rel=0.10)


def test_open_sheet_has_no_interior():
    vertices = np.array([[-0.3, -0.3, 0.0], [0.3, -0.3, 0.0], [0.3, 0.3, 0.0], [-0.3, 0.3, 0.0]])
    centers, grid = voxel_service.voxelize_solid(vertices, fan_triangulate([(0, 1, 2, 3)]), 16)
    assert centers.shape == (0, 3)
    assert grid.surface.any()
    assert not grid.interior.any()


def test_solid_needs_faces():
    with pytest.raises(voxel_service.EmptyMeshError):
        voxel_service.voxelize_solid(np.zeros((3, 3)), np.zeros((0, 3), dtype=np.int64), 8)


# --- segmented meshes -----------------------------------------------------


def test_single_segment_matches_solid_voxelization():
    vertices, faces = box_mesh()
    mesh = SegmentedMesh(vertices=vertices, segments=[MeshSegment("body", faces)])
    voxels = voxel_service.voxelize_segmented(mesh, 16)
    normalized, center, scale = voxel_service.normalize_vertices(vertices)
    np.testing.assert_allclose(center, 0.0)
    assert scale == pytest.approx(0.5)
    expected, _ = voxel_service.voxelize_solid(normalized, fan_triangulate(faces), 16)
    np.testing.assert_array_equal(voxels.centers, expected)
    assert set(voxels.segment_ids) == {"body"}


def test_segment_ids_follow_containment():
    voxels = voxel_service.voxelize_segmented(two_cubes(), 16)
    assert len(voxels) > 0
    for center, segment_id in zip(voxels.centers, voxels.segment_ids):
        assert segment_id == ("left" if center[0] < 0 else "right")
    assert set(voxels.segment_ids) == {"left", "right"}


def test_segment_cap_is_exact_and_deterministic():
    mesh = two_cubes()
    full = voxel_service.voxelize_segmented(mesh, 16)
    capped = voxel_service.voxelize_segmented(mesh, 16, k_seg=10, seed=4)
    assert len(capped) == 20
    assert capped.segment_ids.count("left") == 10
    full_set = {tuple(c) for c in full.centers}
    assert all(tuple(c) in full_set for c in capped.centers)
    again = voxel_service.voxelize_segmented(mesh, 16, k_seg=10, seed=4)
    np.testing.assert_array_equal(capped.centers, again.centers)


def test_global_cap():
    voxels = voxel_service.voxelize_segmented(two_cubes(), 16, k_seg=10, k_all=7, seed=1)
    assert len(voxels) == 7
    assert len(voxels.segment_ids) == 7


def test_caps_need_a_seed():
    with pytest.raises(ValueError, match="seed"):
        voxel_service.voxelize_segmented(two_cubes(), 16, k_seg=10)


def test_zero_extent_mesh():
    mesh = SegmentedMesh(vertices=np.zeros((3, 3)), segments=[MeshSegment("dot", [(0, 1, 2)])])
    with pytest.raises(voxel_service.ZeroScaleError, match="zero scale"):
        voxel_service.voxelize_segmented(mesh, 8)


def test_centers_lie_in_the_cube_and_discretize_is_idempotent():
    voxels = voxel_service.voxelize_segmented(two_cubes(), 20)
    assert np.all(np.abs(voxels.centers) < 0.5)
    assert np.all((voxels.indices >= 0) & (voxels.indices < 20))
    again, indices = voxel_service.discretize(voxels.discretized, 20)
    np.testing.assert_array_equal(again, voxels.discretized)
    np.testing.assert_array_equal(indices, voxels.indices)


# --- splat occupancy ------------------------------------------------------


def test_isotropic_splat_occupies_its_ball():
    r = 64
    occupancy = voxel_service.splat_to_occupancy([isotropic_splat(scale=0.1)], r, padding=4.0)
    frame_scale = 2 * 4.0 * 0.1
    radius = math.sqrt(11.3449) * 0.1 / frame_scale
    volume = occupancy.occupied.sum() / r**3
    assert volume == pytest.approx(4.0 / 3.0 * math.pi * radius**3, rel=0.05)


def test_occupancy_needs_splats():
    with pytest.raises(voxel_service.VoxelServiceError):
        voxel_service.splat_to_occupancy([], 16)


def test_far_splats_form_two_components():
    splats = [isotropic_splat((-1.0, 0.0, 0.0), 0.05), isotropic_splat((1.0, 0.0, 0.0), 0.05)]
    occupancy = voxel_service.splat_to_occupancy(splats, 32)
    _, count = ndimage.label(occupancy.occupied)
    assert count == 2


def test_occupancy_grows_with_the_threshold():
    splat = GaussianSplat(mean=(0.0, 0.0, 0.0), quaternion=(0.9238795, 0.3826834, 0.0, 0.0), scales=(0.1, 0.05, 0.2))
    small = voxel_service.splat_to_occupancy([splat], 32, threshold=4.0)
    large = voxel_service.splat_to_occupancy([splat], 32)
    assert small.occupied.sum() < large.occupied.sum()
    assert not np.any(small.occupied & ~large.occupied)


def test_occupancy_ignores_opacity():
    faint = GaussianSplat(mean=(0.0, 0.0, 0.0), quaternion=(1.0, 0.0, 0.0, 0.0), scales=(0.1, 0.1, 0.1), opacity=0.05)
    opaque = GaussianSplat(mean=(0.0, 0.0, 0.0), quaternion=(1.0, 0.0, 0.0, 0.0), scales=(0.1, 0.1, 0.1), opacity=1.0)
    np.testing.assert_array_equal(
        voxel_service.splat_to_occupancy([faint], 16).occupied,
        voxel_service.splat_to_occupancy([opaque], 16).occupied,
    )


def test_ellipsoid_membership_rejects_tiny_scales():
    splat = GaussianSplat(mean=(0.0, 0.0, 0.0), quaternion=(1.0, 0.0, 0.0, 0.0), scales=(1e-12, 0.1, 0.1))
    with pytest.raises(voxel_service.DegenerateSplatError):
        voxel_service.ellipsoid_membership([splat], np.zeros((1, 3)))


# --- depth rendering and carving ------------------------------------------


def test_cameras_look_at_the_origin():
    views = voxel_service.fibonacci_cameras(12, size=8)
    assert len(views) == 12
    for view in views:
        assert np.linalg.norm(view.eye) == pytest.approx(2.0)
        uv, in_front = feature_service.project(view, (0.0, 0.0, 0.0))
        assert in_front
        np.testing.assert_allclose(uv, 0.0, atol=1e-12)


def test_depth_of_a_full_cube_seen_head_on():
    view = CameraView(world_to_camera=feature_service.look_at((0.0, 0.0, 2.0)), fov_y_deg=40.0, width=16, height=16)
    depth = voxel_service.render_depth(OccupancyGrid(np.ones((8, 8, 8), dtype=bool)), view)
    np.testing.assert_allclose(depth[6:10, 6:10], 1.5, atol=1e-9)


def test_depth_misses_an_empty_grid():
    view = voxel_service.fibonacci_cameras(1, size=8)[0]
    depth = voxel_service.render_depth(OccupancyGrid(np.zeros((8, 8, 8), dtype=bool)), view)
    assert np.all(np.isinf(depth))


def _ball(r, radius=0.25):
    idx = np.indices((r, r, r)).reshape(3, -1).T
    centers = (idx + 0.5) / r - 0.5
    return (np.linalg.norm(centers, axis=1) <= radius).reshape(r, r, r)


def test_free_space_around_a_floater_is_carved():
    r = 32
    occupied = _ball(r)
    floater = (16, 16, 29)
    occupied[floater] = True
    views = voxel_service.fibonacci_cameras(16, size=4 * r)
    kept = _index_set(voxel_service.carve_exterior(OccupancyGrid(occupied), views).indices)
    assert floater in kept
    assert (16, 16, 27) not in kept
    assert _index_set(np.argwhere(_ball(r))) <= kept


def test_carving_without_views_is_identity():
    occupied = _ball(16)
    voxels = voxel_service.carve_exterior(OccupancyGrid(occupied), [])
    np.testing.assert_array_equal(voxels.indices, np.argwhere(occupied))


def test_single_splat_keeps_its_occupancy():
    splats = [isotropic_splat(scale=0.1)]
    occupancy = voxel_service.splat_to_occupancy(splats, 16)
    voxels = voxel_service.voxelize_splats(splats, 16, n_views=64)
    occupied = np.argwhere(occupancy.occupied)
    kept = voxels.indices
    assert _index_set(occupied) <= _index_set(kept)
    assert (0, 0, 0) not in _index_set(kept)
    # survivors beyond the occupancy hug its surface
    extra = np.array(sorted(_index_set(kept) - _index_set(occupied))).reshape(-1, 3)
    if len(extra):
        gap = np.abs(extra[:, None, :] - occupied[None, :, :]).max(axis=2).min(axis=1)
        assert gap.max() <= 2
    assert voxels.segment_ids is None
    again = voxel_service.voxelize_splats(splats, 16, n_views=64)
    np.testing.assert_array_equal(again.indices, kept)


@pytest.mark.parametrize("opacity", [0.05, 0.3, 1.0])
def test_faint_splat_survives_carving(opacity):
    splat = GaussianSplat(mean=(0.0, 0.0, 0.0), quaternion=(1.0, 0.0, 0.0, 0.0), scales=(0.1, 0.1, 0.1), opacity=opacity)
    opaque = GaussianSplat(mean=(0.0, 0.0, 0.0), quaternion=(1.0, 0.0, 0.0, 0.0), scales=(0.1, 0.1, 0.1), opacity=1.0)
    occupancy = voxel_service.splat_to_occupancy([splat], 16)
    kept = _index_set(voxel_service.voxelize_splats([splat], 16, n_views=64).indices)
    assert _index_set(np.argwhere(occupancy.occupied)) <= kept
    assert kept == _index_set(voxel_service.voxelize_splats([opaque], 16, n_views=64).indices)


def test_hollow_shell_keeps_its_inside():
    count = 200
    golden = math.pi * (3.0 - math.sqrt(5.0))
    splats = []
    for i in range(count):
        y = 1.0 - 2.0 * (i + 0.5) / count
        ring = math.sqrt(1.0 - y * y)
        splats.append(isotropic_splat((math.cos(golden * i) * ring, y, math.sin(golden * i) * ring), 0.1))
    r = 24
    occupancy = voxel_service.splat_to_occupancy(splats, r)
    voxels = voxel_service.voxelize_splats(splats, r, n_views=16)
    kept = _index_set(voxels.indices)

    assert _index_set(np.argwhere(occupancy.occupied)) <= kept
    assert len(kept) < r**3

    center = voxel_service.splat_frame(splats).to_unit(np.zeros(3))
    lattice = np.argwhere(np.ones((r, r, r), dtype=bool))
    inside = lattice[np.linalg.norm((lattice + 0.5) / r - 0.5 - center, axis=1) < 0.2]
    assert len(inside) > 0
    assert not np.any(occupancy.occupied[tuple(inside.T)])
    assert _index_set(inside) <= kept
