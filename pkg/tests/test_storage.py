import json

import numpy as np
import pandas as pd
import pytest

from models import CameraView, FeatureMap, GaussianSplat, MaterialTriplet, MeshSegment, SegmentedMesh, SolidVoxelization, VoxelFeatures
from services import feature_service
from storage import scene_io, tables, voxel_codec
from storage.checkpoint_repository import CheckpointRepository, HeadCheckpoint, TensorRecord
from storage.errors import FormatError, StorageError


def _lattice_voxels(segment_ids=None):
    indices = np.array([[0, 0, 0], [7, 3, 1], [2, 5, 6]])
    return SolidVoxelization(resolution=8, centers=(indices + 0.5) / 8 - 0.5, segment_ids=segment_ids)


def _missing_only(excinfo):
    return isinstance(excinfo.value, StorageError) and not isinstance(excinfo.value, FormatError)


# --- voxel codec ----------------------------------------------------------


def test_voxels_round_trip(tmp_path):
    voxels = _lattice_voxels(["seat", "Rückenlehne", "seat"])
    path = tmp_path / "chair.voxf"
    voxel_codec.write_voxels(path, voxels)
    restored = voxel_codec.read_voxels(path)
    assert restored.resolution == 8
    np.testing.assert_array_equal(restored.centers, voxels.centers)
    np.testing.assert_array_equal(restored.indices, [[0, 0, 0], [7, 3, 1], [2, 5, 6]])
    np.testing.assert_array_equal(restored.discretized, restored.indices / 8 - 0.5)
    assert restored.segment_ids == ["seat", "Rückenlehne", "seat"]


def test_voxels_without_segments():
    restored = voxel_codec.decode_voxels(voxel_codec.encode_voxels(_lattice_voxels()))
    assert restored.segment_ids is None
    assert len(restored) == 3


def test_voxel_header_checks():
    raw = voxel_codec.encode_voxels(_lattice_voxels(["a", "b", "a"]))
    with pytest.raises(FormatError, match="VOXF"):
        voxel_codec.decode_voxels(b"XXXX" + raw[4:])
    with pytest.raises(FormatError, match="version"):
        voxel_codec.decode_voxels(raw[:4] + np.array([2], dtype="<u4").tobytes() + raw[8:])
    with pytest.raises(FormatError):
        voxel_codec.decode_voxels(raw[:8])


def test_truncated_voxel_files():
    raw = voxel_codec.encode_voxels(_lattice_voxels(["a", "b", "a"]))
    with pytest.raises(FormatError, match="truncated"):
        voxel_codec.decode_voxels(raw[:30])
    with pytest.raises(FormatError, match="truncated"):
        voxel_codec.decode_voxels(raw[:-1])


def test_segment_slot_outside_the_table():
    raw = bytearray(voxel_codec.encode_voxels(_lattice_voxels(["a", "a", "a"])))
    offset = voxel_codec.VOXEL_HEADER.itemsize + voxel_codec.VOXEL_RECORD.fields["segment"][1]
    raw[offset : offset + 4] = np.array([5], dtype="<u4").tobytes()
    with pytest.raises(FormatError, match="string table"):
        voxel_codec.decode_voxels(bytes(raw))


def test_resolution_must_fit_the_index_width():
    with pytest.raises(StorageError):
        voxel_codec.encode_voxels(SolidVoxelization(resolution=70_000, centers=np.zeros((0, 3))))


def test_missing_voxel_file(tmp_path):
    with pytest.raises(StorageError) as excinfo:
        voxel_codec.read_voxels(tmp_path / "absent.voxf")
    assert _missing_only(excinfo)


def test_feature_map_round_trip(tmp_path):
    data = np.random.default_rng(0).normal(size=(4, 4, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "view.vfmp"
    voxel_codec.write_feature_map(path, FeatureMap(data))
    np.testing.assert_array_equal(voxel_codec.read_feature_map(path).data, data)


def test_feature_map_size_must_match_its_header(tmp_path):
    path = tmp_path / "view.vfmp"
    voxel_codec.write_feature_map(path, FeatureMap(np.ones((2, 2, 2))))
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(FormatError, match="expected"):
        voxel_codec.read_feature_map(path)


def test_feature_map_must_be_a_lattice(tmp_path):
    header = np.array([(voxel_codec.FEATURE_MAGIC, 1, 1, 1)], dtype=voxel_codec.FEATURE_HEADER)
    path = tmp_path / "dot.vfmp"
    path.write_bytes(header.tobytes() + np.zeros(1, dtype="<f4").tobytes())
    with pytest.raises(FormatError):
        voxel_codec.read_feature_map(path)


# --- tables ---------------------------------------------------------------


def test_triplets_round_trip_exactly(tmp_path):
    triplets = [MaterialTriplet(2e11 / 3.0, 0.31, 7700.123456789), MaterialTriplet(1.2345e6, 0.4999, 950.0)]
    path = tmp_path / "triplets.csv"
    tables.write_triplets(path, triplets)
    assert tables.read_triplets(path) == triplets
    assert path.read_text().splitlines()[0] == "e_pa,nu,rho_kgm3"


def test_invalid_triplet_rows(tmp_path):
    path = tmp_path / "triplets.csv"
    path.write_text("e_pa,nu,rho_kgm3\n1e9,0.6,1000\n")
    with pytest.raises(FormatError, match="invalid triplet"):
        tables.read_triplets(path)


def test_missing_columns_and_empty_cells(tmp_path):
    path = tmp_path / "triplets.csv"
    path.write_text("e_pa,nu\n1e9,0.3\n")
    with pytest.raises(FormatError, match="lacks columns"):
        tables.read_triplets(path)
    path.write_text("e_pa,nu,rho_kgm3\n1e9,,1000\n")
    with pytest.raises(FormatError, match="empty cells"):
        tables.read_triplets(path)


def test_missing_table(tmp_path):
    with pytest.raises(StorageError) as excinfo:
        tables.read_points(tmp_path / "absent.csv")
    assert _missing_only(excinfo)


def test_latents_and_points_round_trip(tmp_path):
    latents = np.random.default_rng(1).normal(size=(5, 2))
    tables.write_latents(tmp_path / "z.csv", latents)
    np.testing.assert_array_equal(tables.read_latents(tmp_path / "z.csv"), latents)
    points = np.random.default_rng(2).uniform(-0.5, 0.5, size=(7, 3))
    tables.write_points(tmp_path / "points.csv", points)
    np.testing.assert_array_equal(tables.read_points(tmp_path / "points.csv"), points)


def test_sidecar_round_trip(tmp_path):
    materials = np.array([[1e9, 0.3, 1000.0], [2e11, 0.31, 7700.0]])
    path = tmp_path / "field.csv"
    tables.write_sidecar(path, materials, object_ids=np.array(["chair", "lamp"]))
    restored, object_ids = tables.read_sidecar(path, count=2)
    np.testing.assert_array_equal(restored, materials)
    assert list(object_ids) == ["chair", "lamp"]


def test_sidecar_rows_are_ordered_by_voxel_index(tmp_path):
    path = tmp_path / "field.csv"
    path.write_text("voxel_index,e_pa,nu,rho_kgm3\n1,2e11,0.31,7700\n0,1e9,0.3,1000\n")
    materials, object_ids = tables.read_sidecar(path)
    np.testing.assert_array_equal(materials[:, 0], [1e9, 2e11])
    assert object_ids is None


def test_sidecar_must_cover_every_voxel(tmp_path):
    path = tmp_path / "field.csv"
    path.write_text("voxel_index,e_pa,nu,rho_kgm3\n0,1e9,0.3,1000\n2,1e9,0.3,1000\n")
    with pytest.raises(FormatError, match="exactly once"):
        tables.read_sidecar(path)
    tables.write_sidecar(path, np.array([[1e9, 0.3, 1000.0]]))
    with pytest.raises(FormatError, match="exactly once"):
        tables.read_sidecar(path, count=3)


def test_splats_round_trip(tmp_path):
    half = 0.5**0.5
    splats = [
        GaussianSplat(mean=(0.1, -0.2, 0.3), quaternion=(half, 0.0, half, 0.0), scales=(0.01, 0.02, 0.03), opacity=0.4),
        GaussianSplat(mean=(0.0, 0.0, 0.0), quaternion=(1.0, 0.0, 0.0, 0.0), scales=(0.1, 0.1, 0.1)),
    ]
    tables.write_splats(tmp_path / "splats.csv", splats)
    assert tables.read_splats(tmp_path / "splats.csv") == splats


def test_invalid_splat_rows(tmp_path):
    path = tmp_path / "splats.csv"
    path.write_text(",".join(tables.SPLAT_COLUMNS) + "\n0,0,0,2,0,0,0,0.1,0.1,0.1,1\n")
    with pytest.raises(FormatError, match="row 0"):
        tables.read_splats(path)


def test_point_material_table(tmp_path):
    path = tmp_path / "out.csv"
    tables.write_point_materials(path, [[0.0, 0.1, 0.2]], [[1e9, 0.3, 1000.0]])
    frame = pd.read_csv(path, float_precision="round_trip")
    assert list(frame.columns) == ["x", "y", "z", "e_pa", "nu", "rho_kgm3"]
    assert frame.iloc[0].tolist() == [0.0, 0.1, 0.2, 1e9, 0.3, 1000.0]


def test_metric_frame_columns():
    frame = tables.metric_frame([("e", "alde", "global", 0.5)])
    assert list(frame.columns) == ["property", "metric", "aggregation", "value"]


# --- meshes ---------------------------------------------------------------

GROUPED_OBJ = """\
# tetrahedron split in two groups
v 0 0 0
v 1 0 0
v 0 1 0
v 0 0 1
g base
f 1 2 3
g side
f -4 -3 -1
f 1/1/1 3//3 4
"""


def test_obj_groups_become_segments(tmp_path):
    path = tmp_path / "tet.obj"
    path.write_text(GROUPED_OBJ)
    mesh = scene_io.read_obj(path)
    assert [s.segment_id for s in mesh.segments] == ["base", "side"]
    assert mesh.segments[0].faces == [(0, 1, 2)]
    assert mesh.segments[1].faces == [(0, 1, 3), (0, 2, 3)]


def test_obj_without_groups_uses_the_default_segment(tmp_path):
    path = tmp_path / "tri.obj"
    path.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert [s.segment_id for s in scene_io.read_obj(path).segments] == ["default"]


@pytest.mark.parametrize(
    "body, message",
    [
        ("v 0 0\n", "three coordinates"),
        ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 0 1 2\n", "1-based"),
        ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n", "missing vertex"),
        ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2\n", "at least three"),
        ("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 1 2\n", "distinct"),
    ],
)
def test_malformed_obj(tmp_path, body, message):
    path = tmp_path / "bad.obj"
    path.write_text(body)
    with pytest.raises(FormatError, match=message):
        scene_io.read_obj(path)


def test_obj_round_trip(tmp_path):
    mesh = SegmentedMesh(
        vertices=np.array([[0.1, 0.2, 0.3], [1.0 / 3.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]]),
        segments=[MeshSegment("left", [(0, 1, 2)]), MeshSegment("right", [(0, 2, 3), (1, 2, 3)])],
    )
    path = tmp_path / "mesh.obj"
    scene_io.write_obj(path, mesh)
    restored = scene_io.read_obj(path)
    np.testing.assert_array_equal(restored.vertices, mesh.vertices)
    assert restored.segments == mesh.segments


# --- cameras and views ----------------------------------------------------


def _camera(eye=(0.3, -1.2, 1.5)):
    return CameraView(world_to_camera=feature_service.look_at(eye), fov_y_deg=40.0, width=64, height=48)


def test_camera_round_trip(tmp_path):
    view = _camera()
    path = tmp_path / "camera.json"
    scene_io.write_camera(path, view)
    restored = scene_io.read_camera(path)
    np.testing.assert_array_equal(restored.world_to_camera, view.world_to_camera)
    assert (restored.fov_y_deg, restored.width, restored.height) == (40.0, 64, 48)


@pytest.mark.parametrize(
    "change",
    [
        {"lens": "wide"},
        {"world_to_camera": [1.0] * 15},
        {"world_to_camera": [2.0, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1, 0, 0, 0, 0, 1]},
        {"width": 0},
    ],
)
def test_invalid_camera_files(tmp_path, change):
    payload = _camera().to_dict()
    payload.update(change)
    path = tmp_path / "camera.json"
    path.write_text(json.dumps(payload))
    with pytest.raises(FormatError):
        scene_io.read_camera(path)


def test_view_manifest_resolves_relative_maps(tmp_path):
    maps = tmp_path / "maps"
    voxel_codec.write_feature_map(maps / "a.vfmp", FeatureMap(np.ones((2, 2, 3))))
    voxel_codec.write_feature_map(maps / "b.vfmp", FeatureMap(np.zeros((2, 2, 3))))
    entries = [
        {"camera": _camera((0.0, 0.0, 2.0)).to_dict(), "feature_map": "maps/a.vfmp"},
        {"camera": _camera((2.0, 0.0, 0.0)).to_dict(), "feature_map": "maps/b.vfmp"},
    ]
    (tmp_path / "views.json").write_text(json.dumps(entries))
    pairs = scene_io.read_view_manifest(tmp_path / "views.json")
    assert len(pairs) == 2
    np.testing.assert_allclose(pairs[1][0].eye, [2.0, 0.0, 0.0], atol=1e-12)
    assert pairs[0][1].data.sum() == 12.0
    assert pairs[1][1].data.sum() == 0.0


def test_view_manifest_errors(tmp_path):
    path = tmp_path / "views.json"
    path.write_text(json.dumps({"camera": {}}))
    with pytest.raises(FormatError, match="JSON list"):
        scene_io.read_view_manifest(path)
    path.write_text(json.dumps([{"camera": _camera().to_dict(), "feature_map": "absent.vfmp"}]))
    with pytest.raises(StorageError) as excinfo:
        scene_io.read_view_manifest(path)
    assert _missing_only(excinfo)


def test_features_round_trip(tmp_path):
    features = VoxelFeatures(features=np.random.default_rng(3).normal(size=(6, 4)), visible=np.array([1, 0, 1, 1, 0, 1], dtype=bool))
    path = tmp_path / "features.npz"
    scene_io.write_features(path, features)
    restored = scene_io.read_features(path)
    np.testing.assert_array_equal(restored.features, features.features)
    np.testing.assert_array_equal(restored.visible, features.visible)


def test_feature_archive_errors(tmp_path):
    path = tmp_path / "features.npz"
    with path.open("wb") as fh:
        np.savez(fh, features=np.zeros((3, 2)))
    with pytest.raises(FormatError):
        scene_io.read_features(path)
    with path.open("wb") as fh:
        np.savez(fh, features=np.zeros((3, 2)), visible=np.ones(2, dtype=bool))
    with pytest.raises(FormatError, match="mismatched"):
        scene_io.read_features(path)


# --- checkpoints ----------------------------------------------------------


def test_head_checkpoint_document_round_trip(tmp_path):
    checkpoint = HeadCheckpoint(layers=[TensorRecord(name="weight", value=[[0.1, 1.0 / 3.0]])], meta={"hidden": 8})
    repository = CheckpointRepository(tmp_path / "head.json")
    repository.save(checkpoint)
    assert repository.load_head() == checkpoint


def test_checkpoint_errors(tmp_path):
    repository = CheckpointRepository(tmp_path / "model.json")
    with pytest.raises(StorageError) as excinfo:
        repository.load_matvae()
    assert _missing_only(excinfo)
    repository.storage_path.write_text("{not json")
    with pytest.raises(FormatError):
        repository.load_matvae()


def test_checkpoint_kinds_are_not_interchangeable(tmp_path):
    repository = CheckpointRepository(tmp_path / "head.json")
    repository.save(HeadCheckpoint(layers=[], meta={}))
    with pytest.raises(FormatError):
        repository.load_matvae()
