import numpy as np
import pytest

from faceforge.camera import Illumination, Pose
from faceforge.model import InvalidArgument
from faceforge.params import FaceParams, param_slices


def random(m, rng):
    return FaceParams(rng.normal(size=m.k_id), rng.normal(size=m.k_exp), rng.normal(size=m.k_alb),
                      Pose(scale=1.3, pitch=0.1, yaw=0.2, roll=-0.3, tx=5, ty=6),
                      Illumination(rng.normal(size=27)))


def test_vector_round_trip(model, rng):
    p = random(model, rng)
    q = FaceParams.from_vector(p.to_vector(), model.k_id, model.k_exp, model.k_alb)
    assert np.array_equal(q.to_vector(), p.to_vector())


def test_slices_cover_vector(model, rng):
    p = random(model, rng)
    v = p.to_vector()
    sl = param_slices(model)
    assert np.array_equal(v[sl["alpha_id"]], p.alpha_id)
    assert np.array_equal(v[sl["alpha_exp"]], p.alpha_exp)
    assert np.array_equal(v[sl["alpha_alb"]], p.alpha_alb)
    assert np.array_equal(v[sl["angles"]], [0.1, 0.2, -0.3])
    assert np.array_equal(v[sl["scale"]], [1.3])
    assert np.array_equal(v[sl["t"]], [5, 6])
    assert np.array_equal(v[sl["illum"]], p.illum.coeffs)
    assert sl["illum"].stop == v.size


def test_dict_round_trip_is_exact(model, rng):
    p = random(model, rng)
    q = FaceParams.from_dict(p.to_dict())
    assert np.array_equal(q.to_vector(), p.to_vector())


def test_validation(model):
    with pytest.raises(InvalidArgument):
        FaceParams([np.nan], [0.0], [0.0], Pose(), Illumination())
    with pytest.raises(InvalidArgument):
        FaceParams.neutral(model).copy(alpha_id=np.zeros(model.k_id + 1)).check(model)
    with pytest.raises(InvalidArgument):
        FaceParams.from_dict({"alpha_id": []})
