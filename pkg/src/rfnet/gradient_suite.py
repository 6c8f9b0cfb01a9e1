"""Finite-difference checks of every differentiable operation and every loss.

Each case builds a small float64 problem (inputs at most 24x24, at most four
correspondences), contracts the output with fixed random weights and compares
reverse-mode gradients against central differences for each input.  Primitive
operations are held to 1e-4 max relative error, composed losses to 1e-3.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .descriptor import DescriptorConfig, RFDescriptor, distance_matrix, paired_distance
from .detector import DetectorConfig, DetectorOutputs, RFDetector
from .engine import (
    BatchNormState,
    Tensor,
    arctan2,
    batch_norm,
    bilinear_sample,
    concatenate,
    conv2d,
    grad_check,
    instance_norm,
    l2_normalize,
    leaky_relu,
    minimum,
    promoted,
    relative_error,
    relu,
    scale_softmax,
    stack,
    where,
    windowed_softmax,
)
from .geometry import crop_patches, translation, warp_map
from .losses import build_correspondences, describe_batch, description_loss, patch_loss, score_loss

PRIMITIVE_TOL = 1e-4
COMPOSED_TOL = 1e-3


@dataclass
class GradientCase:
    name: str
    kind: str  # "primitive" or "composed"
    run: Callable[[np.random.Generator], float]

    @property
    def tolerance(self) -> float:
        return PRIMITIVE_TOL if self.kind == "primitive" else COMPOSED_TOL


@dataclass
class GradientResult:
    name: str
    kind: str
    error: float
    tolerance: float
    seconds: float

    @property
    def passed(self) -> bool:
        return math.isfinite(self.error) and self.error < self.tolerance


def _weights(rng, shape):
    return Tensor(rng.standard_normal(shape))


def _contract(out: Tensor, w: Tensor) -> Tensor:
    return (out * w).sum()


def _away_from_zero(rng, shape, low=0.05):
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < low, np.sign(x + 1e-12) * low + x, x)


def _check_all(f, inputs, eps=1e-6, **kw) -> float:
    """Worst grad_check over several inputs of the same closure."""
    return max(grad_check(lambda _: f(), x, eps=eps, **kw) for x in inputs)


# -- primitives ------------------------------------------------------------------------------
def _elementwise(rng):
    a = Tensor(rng.uniform(0.5, 2.0, (4, 5)))
    b = Tensor(rng.uniform(0.5, 2.0, (1, 5)))
    w = _weights(rng, (4, 5))

    def f():
        y = (a * b + a / b - b) ** 2 + (a.log() + b.exp()).sqrt() + a.sin() * b.cos()
        return _contract(y, w) + (1.0 / a).sum() + (3.0 - b).sum()

    return _check_all(f, [a, b])


def _reductions_and_shapes(rng):
    a = Tensor(rng.standard_normal((3, 4)))
    b = Tensor(rng.standard_normal((3, 4)))
    w = _weights(rng, (4, 6))

    def f():
        cat = concatenate([a, b], axis=1)  # 3 x 8
        st = stack([a, b], axis=0).mean(axis=0)  # 3 x 4
        mixed = where(a.data > 0, a, b * 2.0)
        low = minimum(a, b * 0.5)
        y = cat.reshape(4, 6) * w + cat.T.sum()
        return y.sum() + (st[1:, ::2] ** 2).sum() + mixed.mean() + low.sum(axis=1, keepdims=True).sum()

    return _check_all(f, [a, b])


def _matmul(rng):
    a, b = Tensor(rng.standard_normal((3, 5))), Tensor(rng.standard_normal((5, 4)))
    w = _weights(rng, (3, 4))
    return _check_all(lambda: _contract(a @ b, w), [a, b])


def _clamp(rng):
    a = Tensor(_away_from_zero(rng, (4, 4)))
    w = _weights(rng, (4, 4))
    return _check_all(lambda: _contract(a.clamp_min(0.0) + relu(a * -1.0), w), [a])


def _conv2d(rng):
    x = Tensor(rng.standard_normal((2, 2, 7, 7)))
    k = Tensor(rng.standard_normal((3, 2, 3, 3)))
    b = Tensor(rng.standard_normal(3))
    w1, w2 = _weights(rng, (2, 3, 7, 7)), _weights(rng, (2, 3, 4, 4))

    def f():
        return _contract(conv2d(x, k, b, padding=1), w1) + _contract(conv2d(x, k, stride=2, padding=1), w2)

    return _check_all(f, [x, k, b])


def _instance_norm(rng):
    x = Tensor(rng.standard_normal((2, 3, 5, 4)))
    w = _weights(rng, (2, 3, 5, 4))
    return _check_all(lambda: _contract(instance_norm(x), w), [x])


def _batch_norm(rng):
    x = Tensor(rng.standard_normal((4, 2, 3, 3)))
    gamma, beta = Tensor(rng.uniform(0.5, 2.0, 2)), Tensor(rng.standard_normal(2))
    w = _weights(rng, (4, 2, 3, 3))
    warm = BatchNormState(2)
    batch_norm(x, gamma, beta, warm, True)

    def fresh():
        # train mode updates the running statistics; give each call its own copy
        return BatchNormState(2, running_mean=warm.running_mean.copy(), running_var=warm.running_var.copy(), tracked=True)

    def f():
        return _contract(batch_norm(x, gamma, beta, fresh(), True), w) + _contract(
            batch_norm(x, gamma, beta, fresh(), False), w
        )

    return _check_all(f, [x, gamma, beta])


def _leaky_relu(rng):
    x = Tensor(_away_from_zero(rng, (5, 6)))
    w = _weights(rng, (5, 6))
    return _check_all(lambda: _contract(leaky_relu(x, 0.01), w), [x])


def _arctan2(rng):
    s, c = Tensor(rng.standard_normal((4, 4))), Tensor(rng.standard_normal((4, 4)))
    w = _weights(rng, (4, 4))
    return _check_all(lambda: _contract(arctan2(s, c), w), [s, c])


def _windowed_softmax(rng):
    h = Tensor(rng.standard_normal((3, 10, 10)))
    w = _weights(rng, (3, 10, 10))
    return _check_all(lambda: _contract(windowed_softmax(h, 15), w) + _contract(windowed_softmax(h, 3), w), [h])


def _scale_softmax(rng):
    h = Tensor(rng.standard_normal((4, 6, 6)) * 2)
    w = _weights(rng, (4, 6, 6))
    return _check_all(lambda: _contract(scale_softmax(h), w), [h])


def _l2_normalize(rng):
    v = Tensor(rng.standard_normal((4, 8)))
    w = _weights(rng, (4, 8))
    return _check_all(lambda: _contract(l2_normalize(v), w), [v])


def _bilinear_sample(rng):
    fmap = Tensor(rng.standard_normal((2, 6, 7)))
    pts = rng.integers(0, 5, size=(12, 2)) + rng.uniform(0.1, 0.9, size=(12, 2))
    grid = Tensor(pts)
    w = _weights(rng, (2, 12))
    return _check_all(lambda: _contract(bilinear_sample(fmap, grid), w), [fmap, grid])


def _warp_map(rng):
    src = Tensor(rng.standard_normal((8, 9)))
    h = np.eye(3) + rng.uniform(-0.05, 0.05, (3, 3))
    h[2] = [1e-3, -1e-3, 1.0]
    w = _weights(rng, (8, 9))
    return _check_all(lambda: _contract(warp_map(h, src), w), [src])


def _crop_patches(rng):
    ys, xs = np.mgrid[0:20, 0:20]
    img = Tensor((np.sin(0.5 * xs + 0.3 * ys) + 0.1 * rng.standard_normal((20, 20)))[None])
    theta = Tensor(np.array([0.3, -1.1, 2.0, 0.7]))
    scale = Tensor(np.array([7.3, 9.1, 5.6, 8.2]))
    centers = np.array([[9.3, 10.2], [10.6, 8.7], [7.2, 11.4], [11.1, 9.9]])
    w = _weights(rng, (4, 1, 6, 6))
    return _check_all(lambda: _contract(crop_patches(img, centers, theta, scale, patch_size=6), w), [img, theta, scale])


def _distances(rng):
    def unit(k):
        v = rng.standard_normal((k, 6))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    a, b = Tensor(unit(4)), Tensor(unit(4))
    w = _weights(rng, (4, 4))
    v = _weights(rng, (4,))
    return _check_all(lambda: _contract(distance_matrix(a, b), w) + _contract(paired_distance(a, b), v), [a, b])


# -- composed losses and networks -------------------------------------------------------------
def _small_models(rng):
    detector = RFDetector(DetectorConfig(n_layers=3, channels=4), rng)
    descriptor = RFDescriptor(DescriptorConfig(widths=(4, 4, 8, 8, 8, 8, 16), patch_size=8), rng)
    for _ in range(3):
        descriptor(Tensor(rng.standard_normal((8, 1, 8, 8))), "train")
    return detector, descriptor


def _score_loss_through_detector(rng):
    detector, _ = _small_models(rng)
    img = Tensor(rng.standard_normal((16, 16)))
    target = rng.random((16, 16))
    params = detector.parameters()

    def f():
        return score_loss(detector(img).score, target)

    with promoted(params):
        errors = [grad_check(lambda _: f(), img, eps=1e-5, max_elements=12, rng=rng, floor=1e-6)]
        # block biases feed an instance norm: their true gradient is zero, hence the floor
        errors += [grad_check(lambda _: f(), p, eps=1e-5, max_elements=4, rng=rng, floor=1e-6) for p in params]
    return max(errors)


def _detector_outputs(rng):
    detector, _ = _small_models(rng)
    img = Tensor(rng.standard_normal((16, 16)))
    ws, wt, wr = (_weights(rng, (16, 16)) for _ in range(3))
    params = detector.parameters()

    def f():
        out = detector(img)
        return _contract(out.score, ws) + 0.1 * _contract(out.orientation, wt) + 0.1 * _contract(out.scale, wr)

    with promoted(params):
        return max(grad_check(lambda _: f(), p, eps=1e-5, max_elements=4, rng=rng, floor=1e-6) for p in params)


def _patch_loss(rng):
    _, descriptor = _small_models(rng)
    ys, xs = np.mgrid[0:24, 0:24]
    img_i = np.sin(0.4 * xs + 0.2 * ys) + np.cos(0.3 * ys - 0.1 * xs) + 0.2 * rng.standard_normal((24, 24))
    img_j = np.roll(img_i, 1, axis=1)
    orient = Tensor(rng.uniform(-1, 1, (24, 24)))
    scale = Tensor(rng.uniform(6, 9, (24, 24)))
    zero = Tensor(np.zeros((24, 24)))
    fixed_j = DetectorOutputs(zero, Tensor(np.full((24, 24), 0.2)), Tensor(np.full((24, 24), 7.0)), zero, zero, zero)
    kept = np.array([[8, 9], [14, 12], [11, 16], [15, 7]])
    params = descriptor.parameters()

    def f():
        det_i = DetectorOutputs(zero, orient, scale, zero, zero, zero)
        batch = build_correspondences(kept, translation(1, 0), det_i, fixed_j, img_i, img_j, 8)
        return patch_loss(describe_batch(batch, descriptor, "eval"))

    # only the anchor pixels of the orientation/scale maps carry gradient; probe those
    anchors = kept[:, 1] * 24 + kept[:, 0]
    with promoted(params):
        errors = [_check_at(f, t, anchors) for t in (orient, scale)]
        errors += [grad_check(lambda _: f(), p, eps=1e-6, max_elements=4, rng=rng) for p in params[:3]]
    return max(errors)


def _check_at(f, x, flat_idx, eps=1e-6) -> float:
    with promoted([x]):
        x.requires_grad = True
        x.grad = None
        f().backward()
        analytic = x.grad.reshape(-1)[flat_idx]
        flat = x.data.reshape(-1)
        numeric = []
        for i in flat_idx:
            orig = flat[i]
            flat[i] = orig + eps
            up = float(f().data)
            flat[i] = orig - eps
            down = float(f().data)
            flat[i] = orig
            numeric.append((up - down) / (2 * eps))
        x.requires_grad = False
        return float(relative_error(analytic, np.array(numeric)).max())


def _description_loss_masked(rng):
    def unit(k):
        v = rng.standard_normal((k, 8))
        return v / np.linalg.norm(v, axis=1, keepdims=True)

    di, dj = Tensor(unit(4)), Tensor(unit(4))
    # two centers within the 5 px radius so the mask is active
    ci = np.array([[0.0, 0.0], [3.0, 0.0], [40.0, 0.0], [80.0, 0.0]])
    cj = np.array([[0.0, 1.0], [2.0, 2.0], [40.0, 1.0], [80.0, 1.0]])
    return _check_all(lambda: description_loss(di, dj, ci, cj, radius=5.0, margin=2.0), [di, dj])


def _descriptor_forward(rng):
    _, descriptor = _small_models(rng)
    patches = Tensor(rng.standard_normal((3, 1, 8, 8)))
    w = _weights(rng, (3, 16))
    params = descriptor.parameters()

    def f():
        return _contract(descriptor(patches, "eval"), w) + _contract(descriptor(patches, "batch"), w)

    with promoted(params):
        errors = [grad_check(lambda _: f(), patches, eps=1e-6, max_elements=20, rng=rng)]
        errors += [grad_check(lambda _: f(), p, eps=1e-6, max_elements=4, rng=rng) for p in params]
    return max(errors)


CASES = [
    GradientCase("elementwise arithmetic", "primitive", _elementwise),
    GradientCase("reductions, indexing and shape ops", "primitive", _reductions_and_shapes),
    GradientCase("matmul", "primitive", _matmul),
    GradientCase("clamp_min / relu", "primitive", _clamp),
    GradientCase("conv2d", "primitive", _conv2d),
    GradientCase("instance_norm", "primitive", _instance_norm),
    GradientCase("batch_norm", "primitive", _batch_norm),
    GradientCase("leaky_relu", "primitive", _leaky_relu),
    GradientCase("arctan2", "primitive", _arctan2),
    GradientCase("windowed_softmax", "primitive", _windowed_softmax),
    GradientCase("scale_softmax", "primitive", _scale_softmax),
    GradientCase("l2_normalize", "primitive", _l2_normalize),
    GradientCase("bilinear_sample", "primitive", _bilinear_sample),
    GradientCase("warp_map", "primitive", _warp_map),
    GradientCase("crop_patches", "primitive", _crop_patches),
    GradientCase("descriptor distances", "primitive", _distances),
    GradientCase("score loss through detector", "composed", _score_loss_through_detector),
    GradientCase("detector outputs", "composed", _detector_outputs),
    GradientCase("patch loss", "composed", _patch_loss),
    GradientCase("description loss with neighbor mask", "composed", _description_loss_masked),
    GradientCase("descriptor forward", "composed", _descriptor_forward),
]


def run_gradient_suite(seed: int = 0) -> list[GradientResult]:
    results = []
    for i, case in enumerate(CASES):
        start = time.perf_counter()
        error = case.run(np.random.default_rng([seed, i]))
        results.append(GradientResult(case.name, case.kind, error, case.tolerance, time.perf_counter() - start))
    return results
