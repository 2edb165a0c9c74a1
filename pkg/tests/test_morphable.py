import numpy as np
import pytest

from geoconv.errors import DimensionError, FormatError, VersionError
from geoconv.morphable import (
    MorphableModel,
    ShapeCoeffs,
    build_shape,
    load_morphable_model,
    make_synthetic_face_model,
    save_morphable_model,
    synthetic_expression_support,
)


@pytest.fixture(scope="module")
def model():
    return make_synthetic_face_model(resolution=16, seed=11)


def test_zero_coeffs_reproduce_mean(model):
    mesh = build_shape(model, ShapeCoeffs.zeros(model))
    assert np.array_equal(mesh.vertices.ravel(), model.mean_shape)


def test_standard_dims_accepted_wrong_dims_rejected(model):
    assert model.num_id == 100
    assert model.num_exp == 79
    build_shape(model, ShapeCoeffs(np.zeros(100), np.zeros(79)))
    with pytest.raises(DimensionError):
        build_shape(model, ShapeCoeffs(np.zeros(99), np.zeros(79)))


def test_single_vertex_model_by_hand():
    # one vertex, one identity column (1,0,0): w_id=(2,) must move x by 2
    mean = np.zeros(3)
    id_basis = np.array([[1.0], [0.0], [0.0]])
    exp_basis = np.zeros((3, 1))
    model = MorphableModel(mean, id_basis, exp_basis, np.zeros((0, 3), dtype=np.int64))
    mesh = build_shape(model, ShapeCoeffs(np.array([2.0]), np.array([0.0])))
    assert np.allclose(mesh.vertices[0], [2.0, 0.0, 0.0])


def test_build_shape_affine(model):
    rng = np.random.default_rng(5)
    for _ in range(5):
        a_id, b_id = rng.normal(0, 0.3, (2, model.num_id))
        a_exp, b_exp = rng.normal(0, 0.3, (2, model.num_exp))
        combined = build_shape(model, ShapeCoeffs(a_id + b_id, a_exp + b_exp))
        base = build_shape(model, ShapeCoeffs(a_id, a_exp))
        pure_b = model.id_basis @ b_id + model.exp_basis @ b_exp
        delta = combined.vertices.ravel() - base.vertices.ravel()
        scale = max(np.max(np.abs(pure_b)), 1.0)
        assert np.max(np.abs(delta - pure_b)) / scale < 1e-9


def test_topology_independent_of_coeffs(model):
    rng = np.random.default_rng(9)
    coeffs = ShapeCoeffs(rng.normal(size=model.num_id), rng.normal(size=model.num_exp))
    mesh = build_shape(model, coeffs)
    assert np.array_equal(mesh.triangles, model.triangles)


def test_model_file_roundtrip_bit_exact(tmp_path, model):
    path = tmp_path / "face.gmm"
    save_morphable_model(model, path)
    loaded = load_morphable_model(path)
    assert np.array_equal(loaded.mean_shape, model.mean_shape)
    assert np.array_equal(loaded.id_basis, model.id_basis)
    assert np.array_equal(loaded.exp_basis, model.exp_basis)
    assert np.array_equal(loaded.triangles, model.triangles)
    # second write produces identical bytes
    path2 = tmp_path / "face2.gmm"
    save_morphable_model(loaded, path2)
    assert path.read_bytes() == path2.read_bytes()


def test_corrupted_magic(tmp_path, model):
    path = tmp_path / "face.gmm"
    save_morphable_model(model, path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"XXXX"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError):
        load_morphable_model(path)


def test_version_bump_rejected(tmp_path, model):
    path = tmp_path / "face.gmm"
    save_morphable_model(model, path)
    raw = bytearray(path.read_bytes())
    raw[3] = ord("2")
    path.write_bytes(bytes(raw))
    with pytest.raises(VersionError):
        load_morphable_model(path)


def test_truncated_payload(tmp_path, model):
    path = tmp_path / "face.gmm"
    save_morphable_model(model, path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) // 2])
    with pytest.raises(FormatError, match="truncated"):
        load_morphable_model(path)


def test_synthetic_determinism():
    a = make_synthetic_face_model(resolution=12, seed=3)
    b = make_synthetic_face_model(resolution=12, seed=3)
    assert np.array_equal(a.mean_shape, b.mean_shape)
    assert np.array_equal(a.id_basis, b.id_basis)
    assert np.array_equal(a.exp_basis, b.exp_basis)


def test_synthetic_grid_counts():
    model = make_synthetic_face_model(resolution=32, seed=0)
    assert model.num_vertices == 1024
    assert len(model.triangles) == 2 * 31 * 31


def test_resolution_below_8_rejected():
    with pytest.raises(DimensionError):
        make_synthetic_face_model(resolution=7, seed=0)


@pytest.mark.parametrize("column", [0, 1])
def test_expression_column_locality(model, column):
    mask = synthetic_expression_support(16, column)
    field = model.exp_basis[:, column].reshape(-1, 3)
    moved = np.any(field != 0.0, axis=1)
    assert moved.any()
    assert not np.any(moved & ~mask)
