import math

import numpy as np
import pytest

import scenes
from faceforge.camera import Pose, default_pose
from faceforge.model import InvalidArgument
from faceforge.params import FaceParams
from faceforge.raster import pixel_albedo, render_params, render_pncc
from faceforge.synthesis import (AugmentationSpec, DeltaPoseDistribution, augment_sample,
                                 draw_prev_pose, fit_delta_distribution, rerender_rmse,
                                 sample_rng, simulate_pairs, simulate_prev_frame, synthetic_sample)


def fitted_input(seed=0, size=64):
    m = scenes.model(0)
    rng = np.random.default_rng(seed)
    spec = AugmentationSpec(yaw=(-0.3, 0.3), pitch=(-0.2, 0.2), roll=(-0.1, 0.1),
                            translation=(-0.02, 0.02), scale=(1, 1))
    p = scenes.random_params(m, rng, size, size, spec)
    img, r = render_params(m, p, size, size, background=np.full(3, 0.1))
    alb = pixel_albedo(r, m.triangles, p.albedo(m))
    return m, p, img.pixels, r, alb


def test_pinned_spec_reproduces_original():
    m, p, img, r, alb = fitted_input()
    spec = AugmentationSpec.pinned(p, m, variants=2)
    out = augment_sample(img, p, alb, r, m, spec)
    assert len(out) == 2
    for s in out:
        np.testing.assert_array_equal(s.mask, r.mask)
        assert np.abs(s.image - img).max() < 1e-10
        np.testing.assert_allclose(s.params.to_vector(), p.to_vector(), atol=1e-12)


def test_default_spec_emits_twenty_consistent_variants():
    m, p, img, r, alb = fitted_input(1)
    out = augment_sample(img, p, alb, r, m)
    assert len(out) == 20
    spec = AugmentationSpec()
    for s in out:
        assert rerender_rmse(s, m) < 1e-6
        rel = s.params.alpha_exp / m.sigma_exp
        assert np.all(np.abs(rel) <= 2.0)
        assert abs(s.params.pose.yaw) <= math.radians(60) + 1e-12
        assert s.meta["background"] == "unwarped-original"
    assert len({s.sample_id for s in out}) == 20
    assert spec.variants == 20


def test_augmentation_is_order_independent():
    m, p, img, r, alb = fitted_input(2)
    spec = AugmentationSpec(variants=4, seed=9)
    full = augment_sample(img, p, alb, r, m, spec)
    later = augment_sample(img, p, alb, r, m, AugmentationSpec(variants=2, seed=9), index_offset=2)
    for a, b in zip(full[2:], later):
        np.testing.assert_array_equal(a.params.to_vector(), b.params.to_vector())
        np.testing.assert_array_equal(a.image, b.image)


def test_offscreen_variants_are_skipped():
    m, p, img, r, alb = fitted_input(3)
    spec = AugmentationSpec(translation=(5.0, 5.0), variants=2, max_retries=1)
    assert augment_sample(img, p, alb, r, m, spec) == []


def test_spec_validation_and_round_trip():
    with pytest.raises(InvalidArgument):
        AugmentationSpec(variants=0)
    with pytest.raises(InvalidArgument):
        AugmentationSpec(yaw=(1.0, -1.0))
    with pytest.raises(InvalidArgument):
        AugmentationSpec(pitch=(0, float("inf")))
    spec = AugmentationSpec(variants=3, seed=4)
    again = AugmentationSpec.from_dict(spec.to_dict())
    assert again.to_dict() == spec.to_dict()


def test_rerender_detects_wrong_labels():
    m, p, img, r, alb = fitted_input(4)
    s = augment_sample(img, p, alb, r, m, AugmentationSpec(variants=1))[0]
    s.params = s.params.copy(illum=scenes.lighting(0.5))
    assert rerender_rmse(s, m) > 1e-3


def test_delta_fit_constant_and_arithmetic():
    pose = Pose(0.5, 0.1, 0.2, 0.0, 30, 30)
    d = fit_delta_distribution([pose] * 5)
    assert np.all(d.mean == 0) and np.all(d.std == 0)
    c = 0.03
    seq = [Pose(0.5, 0.1, 0.2 + k * c, 0.0, 30, 30) for k in range(6)]
    d = fit_delta_distribution(seq)
    assert abs(d.mean[1] + c) < 1e-12 and d.std[1] < 1e-12


def test_delta_fit_random_walk_oracle():
    rng = np.random.default_rng(5)
    frames = np.cumsum(rng.normal(size=(50, 6)), axis=0)
    d = fit_delta_distribution(frames)
    diffs = [frames[k - 1] - frames[k] for k in range(1, 50)]
    n = len(diffs)
    for j in range(6):
        mean = sum(x[j] for x in diffs) / n
        var = sum((x[j] - mean) ** 2 for x in diffs) / (n - 1)
        assert abs(d.mean[j] - mean) < 1e-12
        assert abs(d.std[j] - math.sqrt(var)) < 1e-12


def test_delta_fit_needs_two_frames():
    with pytest.raises(InvalidArgument):
        fit_delta_distribution([Pose()])
    with pytest.raises(InvalidArgument):
        DeltaPoseDistribution(np.zeros(6), -np.ones(6))


def test_zero_variance_prev_frame_is_current():
    m = scenes.model(0)
    p = scenes.frontal(m, 64, 64)
    dist = DeltaPoseDistribution(np.zeros(6), np.zeros(6))
    prev, pncc = simulate_prev_frame(p, dist, 3, m, 64, 64)
    np.testing.assert_array_equal(prev.pose.as_vector(), p.pose.as_vector())
    np.testing.assert_array_equal(pncc.pixels, render_pncc(m, p.pose, 64, 64).pixels)


def test_prev_frame_deterministic_and_bounded():
    m = scenes.model(0)
    p = scenes.frontal(m, 64, 64)
    a, pa = simulate_prev_frame(p, DeltaPoseDistribution.default(), 7, m, 64, 64, index=3)
    b, pb = simulate_prev_frame(p, DeltaPoseDistribution.default(), 7, m, 64, 64, index=3)
    np.testing.assert_array_equal(a.pose.as_vector(), b.pose.as_vector())
    np.testing.assert_array_equal(pa.pixels, pb.pixels)
    assert pa.pixels.min() >= 0 and pa.pixels.max() <= 1


def test_law_of_large_numbers():
    dist = DeltaPoseDistribution([0.01, -0.02, 0.0, 1.0, -0.5, 0.001], [0.02, 0.03, 0.015, 2, 2, 0.005])
    pose = Pose(0.5, 0.0, 0.0, 0.0, 30.0, 30.0)
    draws = np.array([draw_prev_pose(pose, dist, sample_rng(11, i)).as_vector() - pose.as_vector()
                      for i in range(10_000)])
    assert np.all(np.abs(draws.mean(axis=0) - dist.mean) <= 4 * dist.std / 100)


def test_simulate_pairs_keeps_labels():
    m = scenes.model(0)
    rng = sample_rng(1, 0)
    samples = [synthetic_sample(m, rng, 48, 48, sample_id=f"s{k}") for k in range(3)]
    pairs = simulate_pairs(samples, m, seed=2)
    for s, q in zip(samples, pairs):
        assert q.params is s.params and q.prev_params is not None
        assert q.meta["delta_placeholder"] is True
        assert rerender_rmse(q, m) < 1e-6
        assert 0 <= q.pncc.min() and q.pncc.max() <= 1


def test_rng_streams():
    a = sample_rng(1, 2).uniform(size=4)
    np.testing.assert_array_equal(a, sample_rng(1, 2).uniform(size=4))
    assert not np.array_equal(a, sample_rng(1, 3).uniform(size=4))
    assert not np.array_equal(a, sample_rng(2, 2).uniform(size=4))
    with pytest.raises(InvalidArgument):
        sample_rng(-1, 0)


def test_synthetic_sample_render_consistent():
    m = scenes.model(0)
    s = synthetic_sample(m, sample_rng(0, 0), 64, 64)
    assert rerender_rmse(s, m) < 1e-12
    base = FaceParams.neutral(m, default_pose(64, 64))
    assert s.params.alpha_id.shape == base.alpha_id.shape
