import numpy as np
import pytest

from faceforge.camera import default_pose
from faceforge.model import InvalidArgument, Mesh, assemble_albedo, assemble_shape, generate_synthetic_model
from faceforge.params import FaceParams
from faceforge.raster import rasterize


def dense_oracle(mean, basis, alpha):
    out = np.array(mean, dtype=float)
    for i in range(basis.shape[0]):
        for j in range(basis.shape[1]):
            out[i] += basis[i, j] * alpha[j]
    return out


def test_zero_coefficients_give_mean(tiny_model):
    m = tiny_model
    assert np.array_equal(assemble_shape(m, np.zeros(m.k_id), np.zeros(m.k_exp)), m.mean_shape)
    assert np.array_equal(assemble_albedo(m, np.zeros(m.k_alb)), m.mean_albedo)


def test_unit_coefficient_adds_one_column(tiny_model):
    m = tiny_model
    for k in range(m.k_id):
        e = np.eye(m.k_id)[k]
        np.testing.assert_allclose(assemble_shape(m, e, np.zeros(m.k_exp)),
                                   m.mean_shape + m.id_basis[:, k], rtol=0, atol=1e-14)
    for k in range(m.k_alb):
        e = np.eye(m.k_alb)[k]
        np.testing.assert_allclose(assemble_albedo(m, e), m.mean_albedo + m.alb_basis[:, k],
                                   rtol=0, atol=1e-14)


def test_random_coefficients_match_dense_loop(tiny_model, rng):
    m = tiny_model
    a_id, a_exp, a_alb = rng.normal(size=m.k_id), rng.normal(size=m.k_exp), rng.normal(size=m.k_alb)
    expect = dense_oracle(dense_oracle(m.mean_shape, m.id_basis, a_id), m.exp_basis, a_exp)
    got = assemble_shape(m, a_id, a_exp)
    np.testing.assert_allclose(got, expect, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(assemble_albedo(m, a_alb), dense_oracle(m.mean_albedo, m.alb_basis, a_alb),
                               rtol=1e-12, atol=1e-12)


def test_dimension_mismatch_rejected(tiny_model):
    m = tiny_model
    with pytest.raises(InvalidArgument):
        assemble_shape(m, np.zeros(m.k_id + 1), np.zeros(m.k_exp))
    with pytest.raises(InvalidArgument):
        assemble_albedo(m, np.zeros(m.k_alb - 1))


def test_generation_is_deterministic():
    a = generate_synthetic_model(7)
    b = generate_synthetic_model(7)
    for name in ("mean_shape", "id_basis", "exp_basis", "mean_albedo", "alb_basis", "sigma_id",
                 "sigma_exp", "sigma_alb", "triangles", "landmark_indices"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_bases_orthonormal(model):
    for basis in (model.id_basis, model.exp_basis, model.alb_basis):
        gram = basis.T @ basis
        assert np.abs(gram - np.eye(gram.shape[0])).max() < 1e-10


def test_default_frame_coverage(model):
    p = FaceParams.neutral(model, default_pose(64, 64))
    r = rasterize(p.shape(model), p.pose, model.triangles, 64, 64)
    assert r.n_pixels >= 0.10 * 64 * 64


def test_model_invariants(model):
    assert np.all(model.sigma_id > 0) and np.all(model.sigma_exp > 0) and np.all(model.sigma_alb > 0)
    assert model.triangles.max() < model.n_vertices
    assert len(set(model.landmark_indices.tolist())) == len(model.landmark_indices)
    assert model.mean_shape.flags.writeable is False


@pytest.mark.parametrize("kw", [dict(n_vertices=3), dict(k_id=0), dict(n_vertices=4, k_exp=13)])
def test_infeasible_sizes(kw):
    with pytest.raises(InvalidArgument):
        generate_synthetic_model(0, **kw)


def test_landmark_lookup_by_name(model):
    assert model.landmark_index("nose_tip") == model.landmark_indices[model.landmark_names.index("nose_tip")]


def test_mesh_validation():
    with pytest.raises(InvalidArgument):
        Mesh(np.zeros((3, 3)), np.zeros((2, 3)), [[0, 1, 2]])
    with pytest.raises(InvalidArgument):
        Mesh(np.zeros((3, 3)), np.zeros((3, 3)), [[0, 1, 3]])
