import math

import numpy as np
import pytest

from models import CameraView, FeatureMap, SolidVoxelization
from services import feature_service, voxel_service


def _view(eye=(0.0, 0.0, 2.0), fov=40.0, width=64, height=64):
    return CameraView(world_to_camera=feature_service.look_at(eye), fov_y_deg=fov, width=width, height=height)


def _voxels(centers):
    return SolidVoxelization(resolution=16, centers=np.asarray(centers, dtype=np.float64))


def _random_rotation(rng):
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q @ np.diag(np.sign(np.diag(r)))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


# --- cameras --------------------------------------------------------------


def test_intrinsics_at_ninety_degrees():
    fx, fy, cx, cy = feature_service.intrinsics_from_fov(_view(fov=90.0, width=512, height=512))
    assert fy == pytest.approx(256.0)
    assert fx == pytest.approx(fy)
    assert (cx, cy) == (256.0, 256.0)


def test_intrinsics_at_forty_degrees():
    _, fy, _, _ = feature_service.intrinsics_from_fov(_view(width=512, height=512))
    assert fy == pytest.approx(256.0 / math.tan(math.radians(20.0)), rel=1e-12)
    assert fy == pytest.approx(703.354, abs=1e-3)


def test_wide_image_keeps_square_pixels():
    fx, fy, _, _ = feature_service.intrinsics_from_fov(_view(width=640, height=320))
    assert fx == pytest.approx(fy)


def test_look_at_builds_a_rigid_view():
    eye = np.array([0.3, -1.2, 1.5])
    view = _view(eye=eye)
    np.testing.assert_allclose(view.rotation @ view.rotation.T, np.eye(3), atol=1e-12)
    np.testing.assert_allclose(view.eye, eye, atol=1e-12)
    with pytest.raises(ValueError):
        feature_service.look_at((0.0, 0.0, 0.0))


def test_look_at_straight_down_the_up_axis():
    view = _view(eye=(0.0, 2.0, 0.0))
    uv, in_front = feature_service.project(view, (0.0, 0.0, 0.0))
    assert in_front
    np.testing.assert_allclose(uv, 0.0, atol=1e-12)


def test_point_on_axis_and_behind():
    view = _view()
    uv, in_front = feature_service.project(view, (0.0, 0.0, 0.5))
    assert in_front
    np.testing.assert_allclose(uv, 0.0, atol=1e-12)
    _, behind = feature_service.project(view, (0.0, 0.0, 3.0))
    assert not behind


def test_half_fov_point_lands_on_the_image_edge():
    view = _view()
    offset = math.tan(math.radians(20.0))
    right, _ = feature_service.project(view, (offset, 0.0, 1.0))
    left, _ = feature_service.project(view, (-offset, 0.0, 1.0))
    np.testing.assert_allclose(right, [1.0, 0.0], atol=1e-9)
    np.testing.assert_allclose(left, [-1.0, 0.0], atol=1e-9)


def test_projection_is_invariant_under_a_shared_rigid_motion():
    rng = np.random.default_rng(0)
    for _ in range(50):
        view = _view(eye=rng.normal(size=3) * 2.0 + 3.0)
        motion = np.eye(4)
        motion[:3, :3] = _random_rotation(rng)
        motion[:3, 3] = rng.normal(size=3)
        moved = CameraView(
            world_to_camera=view.world_to_camera @ np.linalg.inv(motion),
            fov_y_deg=view.fov_y_deg,
            width=view.width,
            height=view.height,
        )
        points = rng.normal(size=(20, 3))
        uv, front, _ = feature_service.project_points(view, points)
        moved_uv, moved_front, _ = feature_service.project_points(moved, points @ motion[:3, :3].T + motion[:3, 3])
        np.testing.assert_array_equal(front, moved_front)
        np.testing.assert_allclose(uv[front], moved_uv[front], atol=1e-9)


# --- bilinear sampling ----------------------------------------------------


def test_corners_return_their_tokens():
    data = np.random.default_rng(1).normal(size=(5, 5, 3))
    feature_map = FeatureMap(data)
    np.testing.assert_array_equal(feature_service.bilinear_sample(feature_map, (-1.0, -1.0)), data[0, 0])
    np.testing.assert_array_equal(feature_service.bilinear_sample(feature_map, (1.0, 1.0)), data[4, 4])
    np.testing.assert_array_equal(feature_service.bilinear_sample(feature_map, (1.0, -1.0)), data[0, 4])


def test_cell_midpoint_is_the_mean_of_its_corners():
    data = np.random.default_rng(2).normal(size=(3, 3, 4))
    sample = feature_service.bilinear_sample(FeatureMap(data), (-0.5, -0.5))
    np.testing.assert_allclose(sample, data[:2, :2].mean(axis=(0, 1)), atol=1e-12)


def test_constant_map_is_constant_everywhere():
    feature_map = FeatureMap(np.full((6, 6, 2), 0.7))
    uv = np.random.default_rng(3).uniform(-3.0, 3.0, size=(200, 2))
    np.testing.assert_array_equal(feature_service.bilinear_sample_many(feature_map.data, uv), 0.7)


def test_outside_coordinates_clamp_to_the_border():
    data = np.random.default_rng(4).normal(size=(4, 4, 2))
    feature_map = FeatureMap(data)
    np.testing.assert_array_equal(
        feature_service.bilinear_sample(feature_map, (5.0, 0.2)),
        feature_service.bilinear_sample(feature_map, (1.0, 0.2)),
    )


def test_feature_map_needs_a_lattice():
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((1, 1, 3)))
    with pytest.raises(ValueError):
        FeatureMap(np.zeros((3, 4, 3)))


# --- lifting --------------------------------------------------------------


def _ring_views(count, feature_maps):
    cameras = voxel_service.fibonacci_cameras(count, size=64)
    return list(zip(cameras, feature_maps))


def test_constant_views_lift_their_constant():
    voxels = _voxels(np.random.default_rng(5).uniform(-0.4, 0.4, size=(50, 3)))
    value = np.array([0.25, -1.5, 3.0])
    lifted = feature_service.lift_features(voxels, _ring_views(6, [FeatureMap(np.tile(value, (4, 4, 1)))] * 6))
    assert lifted.visible.all()
    np.testing.assert_array_equal(lifted.features, np.tile(value, (50, 1)))


def test_single_view_is_its_own_sample():
    rng = np.random.default_rng(6)
    voxels = _voxels(rng.uniform(-0.4, 0.4, size=(30, 3)))
    feature_map = FeatureMap(rng.normal(size=(8, 8, 5)))
    view = _view()
    lifted = feature_service.lift_features(voxels, [(view, feature_map)])
    uv, _, _ = feature_service.project_points(view, voxels.centers)
    np.testing.assert_array_equal(lifted.features, feature_service.bilinear_sample_many(feature_map.data, uv))


def test_two_constant_views_average():
    voxels = _voxels([[0.0, 0.0, 0.0], [0.1, -0.2, 0.3]])
    a = FeatureMap(np.full((4, 4, 2), 1.0))
    b = FeatureMap(np.full((4, 4, 2), 4.0))
    lifted = feature_service.lift_features(voxels, [(_view((0.0, 0.0, 2.0)), a), (_view((2.0, 0.0, 0.0)), b)])
    np.testing.assert_allclose(lifted.features, 2.5, atol=1e-12)


def test_view_order_does_not_matter():
    rng = np.random.default_rng(7)
    voxels = _voxels(rng.uniform(-0.4, 0.4, size=(40, 3)))
    views = _ring_views(8, [FeatureMap(rng.normal(size=(6, 6, 3))) for _ in range(8)])
    lifted = feature_service.lift_features(voxels, views)
    shuffled = [views[i] for i in rng.permutation(len(views))]
    np.testing.assert_array_equal(feature_service.lift_features(voxels, shuffled).features, lifted.features)


def test_lifted_features_stay_within_the_map_values():
    rng = np.random.default_rng(8)
    voxels = _voxels(rng.uniform(-0.5, 0.5, size=(100, 3)))
    maps = [FeatureMap(rng.normal(size=(5, 5, 4))) for _ in range(5)]
    lifted = feature_service.lift_features(voxels, _ring_views(5, maps))
    stacked = np.stack([m.data for m in maps])
    lows = stacked.min(axis=(0, 1, 2))
    highs = stacked.max(axis=(0, 1, 2))
    assert np.all(lifted.features >= lows - 1e-12)
    assert np.all(lifted.features <= highs + 1e-12)


def test_voxels_behind_every_camera_get_zero_features():
    voxels = _voxels([[0.0, 0.0, 0.0], [0.0, 0.0, 3.0]])
    lifted = feature_service.lift_features(voxels, [(_view(), FeatureMap(np.ones((4, 4, 2))))])
    np.testing.assert_array_equal(lifted.visible, [True, False])
    np.testing.assert_array_equal(lifted.features[1], [0.0, 0.0])


def test_lifting_needs_matching_channels():
    voxels = _voxels([[0.0, 0.0, 0.0]])
    views = [(_view(), FeatureMap(np.ones((4, 4, 2)))), (_view((2.0, 0.0, 0.0)), FeatureMap(np.ones((4, 4, 3))))]
    with pytest.raises(feature_service.ChannelMismatchError):
        feature_service.lift_features(voxels, views)
    with pytest.raises(feature_service.FeatureServiceError):
        feature_service.lift_features(voxels, [])
