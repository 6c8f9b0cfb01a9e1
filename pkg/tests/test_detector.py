import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rfnet.detector import (
    DetectorConfig,
    DetectorOutputs,
    RFDetector,
    estimate_scale,
    fuse_orientation,
    fuse_score,
    keypoint_array,
    receptive_field_sizes,
    select_keypoints,
)
from rfnet.engine import ShapeError, Tensor, arctan2, grad_check, no_grad, promoted

from oracles import impulse_footprint, windowed_softmax_loop


def small_detector(n_layers=3, channels=4, seed=0):
    return RFDetector(DetectorConfig(n_layers=n_layers, channels=channels), np.random.default_rng(seed))


# -- shapes and structure ------------------------------------------------------------------
def test_feature_and_response_shapes():
    det = RFDetector(DetectorConfig(n_layers=10), np.random.default_rng(0))
    img = np.random.default_rng(1).standard_normal((32, 32)).astype(np.float32)
    with no_grad():
        maps = det.build_feature_maps(img)
        h = det.build_response_maps(maps)
    assert len(maps) == 10 and all(m.shape == (1, 16, 32, 32) for m in maps)
    assert h.shape == (10, 32, 32)
    mean = h.data.reshape(10, -1).mean(axis=1)
    var = h.data.reshape(10, -1).var(axis=1)
    np.testing.assert_allclose(mean, 0, atol=1e-5)
    np.testing.assert_allclose(var, 1, atol=1e-3)


def test_constant_feature_map_gives_zero_response():
    det = small_detector(n_layers=2)
    maps = [Tensor(np.full((1, 4, 6, 6), 0.7)) for _ in range(2)]
    h = det.build_response_maps(maps)
    np.testing.assert_allclose(h.data, 0, atol=1e-6)


def test_too_small_image_rejected():
    with pytest.raises(ShapeError, match="3x3"):
        small_detector().build_feature_maps(np.zeros((2, 8)))


def test_forward_is_deterministic():
    img = np.random.default_rng(2).standard_normal((20, 20)).astype(np.float32)
    a = small_detector(seed=5)(img)
    b = small_detector(seed=5)(img)
    for name in ("score", "orientation", "scale", "prob"):
        np.testing.assert_array_equal(getattr(a, name).data, getattr(b, name).data)


def test_parameter_names_are_unique_and_grouped():
    names = [p.name for p in RFDetector().parameters()]
    assert len(names) == len(set(names)) == 6 * 10
    assert all(n.startswith("det.") for n in names)


@pytest.mark.parametrize("n", [1, 2, 3])
def test_impulse_footprint_matches_receptive_field(n):
    det = small_detector(n_layers=3, channels=4, seed=11)
    changed = impulse_footprint(det, n)
    assert changed.sum() == (2 * n + 1) ** 2
    ys, xs = np.nonzero(changed)
    assert ys.max() - ys.min() == xs.max() - xs.min() == 2 * n


# -- fusion --------------------------------------------------------------------------------
def test_single_layer_fusion_is_identity():
    h = Tensor(np.random.default_rng(3).standard_normal((1, 9, 9)))
    score, prob, h_hat = fuse_score(h)
    np.testing.assert_array_equal(prob.data, 1.0)
    np.testing.assert_allclose(score.data, h_hat.data[0], atol=1e-12)


def test_identical_layers_fuse_to_common_value():
    layer = np.random.default_rng(4).standard_normal((9, 9))
    score, _, h_hat = fuse_score(Tensor(np.stack([layer] * 4)))
    np.testing.assert_allclose(score.data, h_hat.data[0], atol=1e-12)


def test_fuse_score_matches_loop_oracle():
    h = np.random.default_rng(5).standard_normal((3, 9, 9))
    score, prob, h_hat = fuse_score(Tensor(h), window=15)
    hh = windowed_softmax_loop(h, 15)
    expected = np.zeros((9, 9))
    for y in range(9):
        for x in range(9):
            col = hh[:, y, x]
            w = np.exp(col - col.max())
            w /= w.sum()
            expected[y, x] = (col * w).sum()
    np.testing.assert_allclose(score.data, expected, atol=1e-6)
    assert np.all(score.data >= h_hat.data.min(axis=0) - 1e-12)
    assert np.all(score.data <= h_hat.data.max(axis=0) + 1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_fusion_invariants_random_maps(seed):
    h = np.random.default_rng(seed).standard_normal((10, 12, 12)) * 3
    score, prob, h_hat = fuse_score(Tensor(h))
    np.testing.assert_allclose(prob.data.sum(axis=0), 1.0, atol=1e-6)
    scale = estimate_scale(prob).data
    assert scale.min() >= 3 - 1e-9 and scale.max() <= 21 + 1e-9
    assert np.all(score.data >= h_hat.data.min(axis=0) - 1e-12)
    assert np.all(score.data <= h_hat.data.max(axis=0) + 1e-12)


def test_orientation_from_sin_cos_heads():
    prob = Tensor(np.full((3, 4, 4), 1 / 3))
    zeros, ones = np.zeros((3, 4, 4)), np.ones((3, 4, 4))
    np.testing.assert_allclose(fuse_orientation(arctan2(Tensor(zeros), Tensor(ones)), prob).data, 0.0, atol=1e-12)
    np.testing.assert_allclose(
        fuse_orientation(arctan2(Tensor(ones), Tensor(zeros)), prob).data, math.pi / 2, atol=1e-12
    )


def test_orientation_weighted_mean_example():
    theta = Tensor(np.array([0.2, 0.6]).reshape(2, 1, 1))
    prob = Tensor(np.array([0.25, 0.75]).reshape(2, 1, 1))
    assert fuse_orientation(theta, prob).data[0, 0] == pytest.approx(0.5)


def test_scale_examples():
    assert receptive_field_sizes(3).tolist() == [3.0, 5.0, 7.0]
    concentrated = np.zeros((10, 2, 2))
    concentrated[0] = 1
    np.testing.assert_allclose(estimate_scale(Tensor(concentrated)).data, 3.0)
    np.testing.assert_allclose(estimate_scale(Tensor(np.full((10, 2, 2), 0.1))).data, 12.0)


# -- keypoint selection --------------------------------------------------------------------
def outputs_from_score(score, theta=None, scale=None):
    score = np.asarray(score, dtype=np.float64)
    theta = np.zeros_like(score) if theta is None else theta
    scale = np.full_like(score, 3.0) if scale is None else scale
    t = Tensor(score)
    return DetectorOutputs(t, Tensor(theta), Tensor(scale), t, t, t)


def test_single_spike_is_first_keypoint():
    s = np.zeros((12, 12))
    s[4, 7] = 1.0
    kp = select_keypoints(outputs_from_score(s), 3, border=0)
    assert (kp[0].x, kp[0].y) == (7.0, 4.0)


def test_equal_maxima_row_major_order():
    s = np.zeros((6, 6))
    s[3, 1] = s[1, 4] = 1.0
    kp = select_keypoints(outputs_from_score(s), 2, border=0)
    assert [(k.x, k.y) for k in kp] == [(4.0, 1.0), (1.0, 3.0)]


def test_uniform_score_takes_first_pixels():
    kp = select_keypoints(outputs_from_score(np.ones((5, 5))), 5, border=0)
    assert [(k.x, k.y) for k in kp] == [(float(i), 0.0) for i in range(5)]


def test_k_larger_than_available_returns_all():
    kp = select_keypoints(outputs_from_score(np.ones((4, 4))), 100, border=1)
    assert len(kp) == 4


def test_nms_and_border():
    rng = np.random.default_rng(6)
    s = rng.random((20, 20))
    kps = select_keypoints(outputs_from_score(s), 50, nms_radius=2, border=3)
    pts = keypoint_array(kps)
    assert pts.min() >= 3 and pts.max() <= 16
    for i in range(len(pts)):
        for j in range(i):
            assert np.abs(pts[i] - pts[j]).max() > 2


def test_keypoints_carry_orientation_and_scale():
    s = np.zeros((10, 10))
    s[5, 5] = 1
    theta = np.full((10, 10), 0.25)
    scale = np.full((10, 10), 9.0)
    (kp,) = select_keypoints(outputs_from_score(s, theta, scale), 1, border=0)
    assert kp.orientation == 0.25 and kp.scale == 9.0


def test_select_rejects_nonpositive_k():
    with pytest.raises(ValueError):
        select_keypoints(outputs_from_score(np.ones((4, 4))), 0)


# -- gradients -----------------------------------------------------------------------------
def test_detector_gradient_wrt_all_parameters():
    det = RFDetector(DetectorConfig(n_layers=3, channels=4), np.random.default_rng(7))
    rng = np.random.default_rng(8)
    img = Tensor(rng.standard_normal((16, 16)))
    ws, wt, wr = (Tensor(rng.standard_normal((16, 16))) for _ in range(3))

    def functional(_):
        out = det(img)
        return (out.score * ws).sum() + (out.orientation * wt).sum() * 0.1 + (out.scale * wr).sum() * 0.1

    params = det.parameters()
    # block biases feed an instance norm, so their true gradient is exactly zero and the
    # central difference returns roundoff; the floor keeps that from reading as error
    with promoted(params):
        worst = max(
            grad_check(functional, p, eps=1e-5, max_elements=6, rng=np.random.default_rng(9), floor=1e-6)
            for p in params
        )
    assert worst < 1e-3
