import numpy as np
import pytest

import scenes
from faceforge.fitting import LandmarkSet
from faceforge.model import InvalidArgument
from faceforge.pipeline import invrender, load_inverse_rendering, save_inverse_rendering


@pytest.fixture(scope="module")
def detailed():
    m, p, r, ctx, z, ridge, band, img = scenes.ridge_scene(size=96, amplitude=1.0, period=7.5)
    res = invrender(img, LandmarkSet.project(m, p), m, name="ridge")
    return m, p, res


def test_stage3_render_beats_stage1(detailed):
    m, p, res = detailed
    rep = res.report(m)
    assert rep["rmse_stage3"] <= rep["rmse_stage1"]
    assert all(b <= a for a, b in zip(rep["refine_energy"], rep["refine_energy"][1:]))


def test_outputs_round_trip(tmp_path, detailed):
    m, p, res = detailed
    rep = save_inverse_rendering(tmp_path / "ir", res, m)
    for name in ("input.pfm", "fit.json", "mask.pfm", "coarse_depth.pfm", "displacement.pfm",
                 "refined_depth.pfm", "albedo_blended.pfm", "albedo_blended.png",
                 "render_stage1.pfm", "render_stage3.pfm", "report.json"):
        assert (tmp_path / "ir" / name).is_file(), name
    back = load_inverse_rendering(tmp_path / "ir", m)
    np.testing.assert_array_equal(back.mask, res.mask)
    np.testing.assert_array_equal(back.depth.d, res.depth.d.astype(np.float32))
    assert back.name == "ir" and rep["name"] == "ridge"


def test_load_rejects_inconsistent_mask(tmp_path, detailed):
    m, p, res = detailed
    save_inverse_rendering(tmp_path / "ir", res, m)
    from faceforge import io
    mask = io.read_pfm(tmp_path / "ir" / "mask.pfm")
    mask[0, 0] = 1.0 - mask[0, 0]
    io.write_pfm(tmp_path / "ir" / "mask.pfm", mask)
    with pytest.raises(InvalidArgument):
        load_inverse_rendering(tmp_path / "ir", m)
