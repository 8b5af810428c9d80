import numpy as np
import pytest

import scenes
from faceforge.model import InvalidArgument
from faceforge.raster import forward_valid
from faceforge.refine import (DepthField, RefineConfig, ShadingContext, SingularSystem,
                              laplacian_matrix, refine_displacement, refine_displacement_ctx,
                              refine_energy, refine_energy_ctx, shading_residuals)


@pytest.fixture(scope="module")
def flat():
    m = scenes.model(0)
    p = scenes.frontal(m, 64, 64, scenes.ridge_lighting())
    r = scenes.raster_of(m, p, 64, 64)
    z = np.where(r.mask, r.depth, 0.0)
    ctx = ShadingContext.from_fit(p, m, r)
    return m, p, r, z, ctx


def test_zero_displacement_energy(flat):
    m, p, r, z, ctx = flat
    img = np.random.default_rng(0).uniform(0, 1, (64, 64, 3))
    e_con, d2, l1, total = refine_energy(img, np.zeros((64, 64)), z, p, m, RefineConfig(), r)
    assert d2 == 0 and l1 == 0 and total == e_con
    assert e_con > 0


def test_laplacian_vanishes_on_constant_interior(flat):
    *_, ctx = flat
    mask = ctx.mask
    L = laplacian_matrix(mask)
    v = np.full(int(mask.sum()), 3.7)
    lap = np.zeros(mask.shape)
    lap[mask] = L @ v
    assert np.abs(lap).max() < 1e-12


def test_laplacian_interior_stencil(flat):
    *_, ctx = flat
    mask = ctx.mask
    rng = np.random.default_rng(1)
    d = np.where(mask, rng.normal(size=mask.shape), 0.0)
    lap = np.zeros(mask.shape)
    lap[mask] = laplacian_matrix(mask) @ d[mask]
    h, w = mask.shape
    for y in range(1, h - 1):
        for x in range(1, w - 1):
            if not mask[y, x]:
                continue
            nb = [(y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1)]
            inside = [q for q in nb if mask[q]]
            ref = len(inside) * d[y, x] - sum(d[q] for q in inside)
            assert abs(lap[y, x] - ref) < 1e-12


def test_random_displacement_matches_pixel_oracle(flat):
    m, p, r, z, ctx = flat
    rng = np.random.default_rng(2)
    cfg = RefineConfig()
    mask = r.mask
    d = np.where(mask, rng.normal(scale=0.3, size=mask.shape), 0.0)
    img = ctx.render(z + np.where(mask, rng.normal(scale=0.3, size=mask.shape), 0.0))
    e_con, d2, l1, total = refine_energy(img, d, z, p, m, cfg, r)
    ren = ctx.render(z + d)
    P, con, sq, lap = 0, 0.0, 0.0, 0.0
    h, w = mask.shape
    for y in range(h):
        for x in range(w):
            if not mask[y, x]:
                continue
            P += 1
            for c in range(3):
                con += (255.0 * (ren[y, x, c] - img[y, x, c])) ** 2
            sq += d[y, x] ** 2
            inside = [q for q in ((y - 1, x), (y + 1, x), (y, x - 1), (y, x + 1))
                      if 0 <= q[0] < h and 0 <= q[1] < w and mask[q]]
            lap += abs(len(inside) * d[y, x] - sum(d[q] for q in inside))
    assert abs(e_con - con / P) < 1e-8 * con / P
    assert abs(d2 - sq) < 1e-9 * sq and abs(l1 - lap) < 1e-9 * lap
    assert abs(total - (con / P + (cfg.mu1 * sq + cfg.mu2 * lap) / P)) < 1e-8 * total


def test_raw_sum_convention(flat):
    m, p, r, z, ctx = flat
    cfg = RefineConfig(intensity_scale=1.0, per_pixel_regularizers=False)
    d = np.where(r.mask, 0.1, 0.0)
    e_con, d2, l1, total = refine_energy(ctx.render(z), d, z, p, m, cfg, r)
    assert abs(total - (e_con + cfg.mu1 * d2 + cfg.mu2 * l1)) < 1e-12


def test_energy_rejects_bad_displacement(flat):
    m, p, r, z, ctx = flat
    with pytest.raises(InvalidArgument):
        refine_energy(ctx.render(z), np.zeros((10, 10)), z, p, m, RefineConfig(), r)
    off = np.zeros(r.mask.shape)
    off[~r.mask] = 1.0
    with pytest.raises(InvalidArgument):
        refine_energy_ctx(ctx.render(z), off, z, ctx, RefineConfig())


def test_shading_jacobian_matches_finite_differences(flat):
    m, p, r, z, ctx = flat
    rng = np.random.default_rng(3)
    mask = r.mask
    d = np.where(mask, rng.normal(scale=0.2, size=mask.shape), 0.0)
    img = ctx.render(z)
    _, J = shading_residuals(img, z + d, ctx, intensity_scale=255.0)
    J = J.tocsc()
    ys, xs = np.nonzero(forward_valid(mask))
    pick = rng.choice(ys.size, 25, replace=False)
    idx = np.full(mask.shape, -1)
    idx[mask] = np.arange(int(mask.sum()))
    h = 1e-6
    for k in pick:
        y, x = ys[k], xs[k]
        e = np.zeros(mask.shape)
        e[y, x] = h
        fp = shading_residuals(img, z + d + e, ctx, False, 255.0)[0]
        fm = shading_residuals(img, z + d - e, ctx, False, 255.0)[0]
        fd = (fp - fm) / (2 * h)
        col = J[:, idx[y, x]].toarray().ravel()
        assert np.abs(col - fd).max() <= 1e-3 * max(np.abs(fd).max(), 1e-9)


def test_image_from_coarse_depth_gives_no_displacement(flat):
    m, p, r, z, ctx = flat
    res = refine_displacement(ctx.render(z), z, p, m, raster=r)
    assert np.abs(res.d).max() < 1e-3


def test_huge_mu1_suppresses_displacement():
    m, p, r, ctx, z, ridge, band, img = scenes.ridge_scene(size=64, amplitude=1.0, period=6)
    literal = RefineConfig(mu1=1e3, intensity_scale=1.0, per_pixel_regularizers=False)
    res = refine_displacement_ctx(img, z, ctx, literal)
    assert np.abs(res.d).max() < 1e-4
    free = refine_displacement_ctx(img, z, ctx, RefineConfig())
    damped = refine_displacement_ctx(img, z, ctx, RefineConfig(mu1=1e3))
    assert np.abs(damped.d).max() < 0.2 * np.abs(free.d).max()


def test_ridge_recovery_monotone_and_masked():
    m, p, r, ctx, z, ridge, band, img = scenes.ridge_scene(amplitude=1.0, period=10)
    res = refine_displacement_ctx(img, z, ctx)
    assert np.corrcoef(res.d[band], ridge[band])[0, 1] > 0.8
    assert all(b <= a for a, b in zip(res.energies, res.energies[1:]))
    assert np.all(res.d[~res.mask] == 0)
    refined = res.refined
    np.testing.assert_array_equal(refined[res.mask], (res.z + res.d)[res.mask])


def test_cg_solver_agrees_with_direct():
    m, p, r, ctx, z, ridge, band, img = scenes.ridge_scene(size=64, amplitude=1.0, period=6)
    a = refine_displacement_ctx(img, z, ctx, RefineConfig(max_outer=3))
    b = refine_displacement_ctx(img, z, ctx, RefineConfig(max_outer=3, solver="cg"))
    assert np.abs(a.d - b.d).max() < 1e-4


def test_empty_interior_is_singular():
    mask = np.zeros((8, 8), bool)
    mask[2, 2:6] = True
    ctx = ShadingContext(mask, np.ones((8, 8, 3)), scenes.lighting(), 1.0)
    with pytest.raises(SingularSystem):
        refine_displacement_ctx(np.zeros((8, 8, 3)), np.zeros((8, 8)), ctx)


def test_config_validation():
    for kw in ({"mu1": -1}, {"mu2": -0.1}, {"eps": 0}, {"solver": "lu"}):
        with pytest.raises(InvalidArgument):
            RefineConfig(**kw)


def test_depth_field_identity():
    mask = np.array([[True, False]])
    f = DepthField(mask, np.array([[2.0, 0.0]]), np.array([[0.5, 0.0]]))
    assert f.refined[0, 0] == 2.5 and f.width == 2 and f.height == 1
