import dataclasses

import numpy as np
import pytest

import scenes
from faceforge.camera import SH_C0, Illumination, Pose, default_pose
from faceforge.losses import (PixelBasis, depth_error, loss_col, loss_geo, loss_pose, loss_report,
                              loss_total_single, loss_total_tracking, proj_points)
from faceforge.model import InvalidArgument
from faceforge.params import FaceParams
from faceforge.raster import render_params


def truth_and_basis(seed=0, size=64):
    m = scenes.model(0)
    p = scenes.random_params(m, np.random.default_rng(seed), size, size,
                             scenes.AugmentationSpec(yaw=(-0.5, 0.5), translation=(-0.02, 0.02)))
    r = scenes.raster_of(m, p, size, size)
    return m, p, r, PixelBasis.from_raster(m, r)


def test_truth_projects_to_pixel_centres():
    for seed in range(3):
        m, p, r, basis = truth_and_basis(seed)
        assert basis.n_pixels == r.n_pixels
        assert np.abs(proj_points(basis, p) - basis.pixels).max() < 1e-6


def test_identity_pose_zero_coefficients():
    m, p, r, basis = truth_and_basis()
    q = FaceParams.neutral(m, Pose(scale=0.7, tx=3.0, ty=-2.0))
    np.testing.assert_allclose(proj_points(basis, q), 0.7 * basis.mean[:, :2] + [3.0, -2.0],
                               atol=1e-12)


def test_projection_matches_pixel_loop():
    m, p, r, basis = truth_and_basis(1)
    rng = np.random.default_rng(4)
    q = p.copy(alpha_id=rng.normal(size=m.k_id) * m.sigma_id,
               alpha_exp=rng.normal(size=m.k_exp) * m.sigma_exp,
               pose=Pose(0.6, 0.1, -0.3, 0.2, 20.0, 25.0))
    got = proj_points(basis, q)
    R = q.pose.rotation
    ys, xs = np.nonzero(r.mask)
    n = m.n_vertices
    for k, (y, x) in enumerate(zip(ys, xs)):
        vids = m.triangles[r.tri_index[y, x]]
        lam = r.bary[y, x]
        pt = np.zeros(3)
        for w, v in zip(lam, vids):
            sl = slice(3 * v, 3 * v + 3)
            pt += w * (m.mean_shape[sl] + m.id_basis[sl] @ q.alpha_id + m.exp_basis[sl] @ q.alpha_exp)
        ref = q.pose.scale * (R[:2] @ pt) + q.pose.t
        assert np.abs(got[k] - ref).max() < 1e-9
    assert n == m.mean_shape.size // 3


def test_pose_and_geometry_losses():
    m, p, r, basis = truth_and_basis(2)
    assert loss_pose(basis, p, p) == 0 and loss_geo(basis, p, p) == 0
    geo_only = p.copy(alpha_id=p.alpha_id + m.sigma_id)
    assert loss_pose(basis, p, geo_only) == 0.0
    assert loss_geo(basis, p, geo_only) > 0
    est = p.copy(alpha_exp=p.alpha_exp + 0.5 * m.sigma_exp,
                 pose=Pose.from_vector(p.pose.as_vector() + [0.05, -0.05, 0.02, 1.0, -1.0, 0.01]))
    # brute force: substitute pose / geometry into the truth and project vertex-wise
    a = proj_points(basis, p)
    ref_pose = np.sum((a - proj_points(basis, p.copy(pose=est.pose))) ** 2)
    ref_geo = np.sum((a - proj_points(basis, est.copy(pose=p.pose))) ** 2)
    assert abs(loss_pose(basis, p, est) - ref_pose) < 1e-9 * ref_pose
    assert abs(loss_geo(basis, p, est) - ref_geo) < 1e-9 * ref_geo


def test_single_weighting_examples():
    assert loss_total_single(5.0, 5.0) == (0.5, 5.0)
    w, total = loss_total_single(0.0, 2.0)
    assert w == 1.0 and total == 0.0
    w, total = loss_total_single(3.0, 6.0)
    assert abs(w - 2 / 3) < 1e-15 and abs(total - 4.0) < 1e-12
    assert loss_total_single(0.0, 0.0) == (0.5, 0.0)
    with pytest.raises(InvalidArgument):
        loss_total_single(-1.0, 1.0)


def test_tracking_weighting_examples():
    w1, w2, total = loss_total_tracking(2.0, 2.0, 2.0)
    assert abs(w1 - 1 / 3) < 1e-15 and abs(w2 - 1 / 3) < 1e-15 and abs(total - 2.0) < 1e-12
    w1, w2, total = loss_total_tracking(2.0, 4.0, 0.0)
    assert abs(w1 - 4 / 12) < 1e-15 and abs(w2 - 2 / 12) < 1e-15
    assert abs(total - 4 / 3) < 1e-12
    assert loss_total_tracking(0, 0, 0) == (1 / 3, 1 / 3, 0.0)


def test_color_loss_zero_for_truth():
    m, p, r, basis = truth_and_basis(3)
    img, _ = render_params(m, p, 64, 64)
    assert loss_col(m, p, p.alpha_alb, p.illum, img.pixels) < 1e-10


def test_color_loss_closed_form():
    m = scenes.model(0)
    g = np.zeros((3, 9))
    g[:, 0] = 1.0
    p = FaceParams.neutral(m, default_pose(64, 64), Illumination(g.ravel()))
    brighter = dataclasses.replace(m, mean_albedo=m.mean_albedo + 0.1)
    img, r = render_params(brighter, p, 64, 64)
    expected = r.n_pixels * 3 * 0.01 * (1.0 * SH_C0) ** 2
    assert abs(loss_col(m, p, p.alpha_alb, p.illum, img.pixels) - expected) < 1e-10


def test_color_loss_pixel_oracle():
    m, p, r, basis = truth_and_basis(4)
    rng = np.random.default_rng(6)
    img = rng.uniform(size=(64, 64, 3))
    a = rng.normal(size=m.k_alb) * m.sigma_alb
    illum = scenes.lighting(0.7)
    ren, _ = render_params(m, p.copy(alpha_alb=a, illum=illum), 64, 64)
    ref = 0.0
    for y, x in zip(*np.nonzero(r.mask)):
        ref += float(np.sum((ren.pixels[y, x] - img[y, x]) ** 2))
    assert abs(loss_col(m, p, a, illum, img) - ref) < 1e-9 * ref


def test_color_loss_empty_mask():
    m = scenes.model(0)
    p = FaceParams.neutral(m, Pose(scale=0.5, tx=-1e4, ty=-1e4))
    with pytest.raises(InvalidArgument):
        loss_col(m, p, p.alpha_alb, p.illum, np.zeros((32, 32, 3)))


def test_depth_error_cases():
    rng = np.random.default_rng(7)
    a = rng.normal(size=(10, 10))
    assert depth_error(a, a) == (0.0, 0.0)
    rmse, mae = depth_error(a + 2.5, a)
    assert abs(rmse - 2.5) < 1e-12 and abs(mae - 2.5) < 1e-12
    b = rng.normal(size=(10, 10))
    valid = rng.uniform(size=(10, 10)) > 0.3
    s, t, n = 0.0, 0.0, 0
    for y in range(10):
        for x in range(10):
            if valid[y, x]:
                s += (a[y, x] - b[y, x]) ** 2
                t += abs(a[y, x] - b[y, x])
                n += 1
    rmse, mae = depth_error(a, b, valid)
    assert abs(rmse - np.sqrt(s / n)) < 1e-12 and abs(mae - t / n) < 1e-12
    with pytest.raises(InvalidArgument):
        depth_error(a, b, np.zeros((10, 10), bool))
    c = a.copy()
    c[0, 0] = np.inf
    assert np.isfinite(depth_error(c, b)[0])


def test_loss_report_row():
    m, p, r, basis = truth_and_basis(5)
    est = p.copy(alpha_id=p.alpha_id * 0.5)
    row = loss_report(basis, p, est, l_col=1.5, sample_id="x")
    assert row["n_pixels"] == r.n_pixels and row["sample_id"] == "x"
    assert abs(row["w1"] + row["w2"] + (1 - row["w1"] - row["w2"]) - 1) < 1e-15
    assert "loss_tracking" in row and row["loss_pose"] == 0.0
