"""Receptive-field keypoint detector.

N stacked 3x3 conv blocks give feature maps whose receptive field grows by
two pixels per layer.  A 1x1 head on every layer yields a response map; a
windowed softmax sharpens them, a per-pixel softmax across layers gives the
scale probabilities, and those probabilities fuse score, orientation and
scale into single maps.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .engine import (
    Parameter,
    ShapeError,
    Tensor,
    arctan2,
    as_tensor,
    check_unique,
    conv2d,
    instance_norm,
    leaky_relu,
    scale_softmax,
    stack,
    windowed_softmax,
)


@dataclass
class DetectorConfig:
    n_layers: int = 10
    channels: int = 16
    window: int = 15
    slope: float = 0.01
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.window < 1 or self.window % 2 == 0:
            raise ValueError(f"window must be odd and positive, got {self.window}")


@dataclass
class DetectorOutputs:
    score: Tensor
    orientation: Tensor
    scale: Tensor
    prob: Tensor
    h: Tensor
    h_hat: Tensor
    features: list = field(default_factory=list, repr=False)

    @property
    def shape(self) -> tuple[int, int]:
        return self.score.shape


@dataclass
class Keypoint:
    x: float
    y: float
    score: float
    orientation: float
    scale: float


def glorot_uniform(rng: np.random.Generator, shape: tuple, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape).astype(np.float32)


def conv_param(rng, name: str, cout: int, cin: int, k: int) -> Parameter:
    return Parameter(name, glorot_uniform(rng, (cout, cin, k, k), cin * k * k, cout * k * k))


def receptive_field_sizes(n_layers: int) -> np.ndarray:
    """Side length 2n+1 of layer n's receptive field, n = 1..N."""
    return 2.0 * np.arange(1, n_layers + 1) + 1.0


class RFDetector:
    """Parameters and forward pass of the detector."""

    def __init__(self, config: Optional[DetectorConfig] = None, rng: Optional[np.random.Generator] = None):
        self.config = config or DetectorConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        c = self.config.channels
        self.blocks = []
        self.response_heads = []
        self.orientation_heads = []
        for n in range(1, self.config.n_layers + 1):
            cin = 1 if n == 1 else c
            self.blocks.append((conv_param(rng, f"det.block{n}.weight", c, cin, 3), Parameter(f"det.block{n}.bias", np.zeros(c))))
        for n in range(1, self.config.n_layers + 1):
            self.response_heads.append(
                (conv_param(rng, f"det.response{n}.weight", 1, c, 1), Parameter(f"det.response{n}.bias", np.zeros(1)))
            )
            self.orientation_heads.append(
                (conv_param(rng, f"det.orientation{n}.weight", 2, c, 1), Parameter(f"det.orientation{n}.bias", np.zeros(2)))
            )
        check_unique(self.parameters())

    def parameters(self) -> list[Parameter]:
        out = []
        for group in (self.blocks, self.response_heads, self.orientation_heads):
            for w, b in group:
                out += [w, b]
        return out

    # -- stages ----------------------------------------------------------------------------
    def build_feature_maps(self, image) -> list[Tensor]:
        """M^1..M^N, each 1 x C x H x W; block n >= 2 adds an identity shortcut."""
        image = as_tensor(image)
        if image.ndim == 2:
            image = image.reshape(1, 1, *image.shape)
        if image.ndim != 4 or image.shape[:2] != (1, 1):
            raise ShapeError(f"detector expects a 1 x 1 x H x W image, got shape {image.shape}")
        if image.shape[2] < 3 or image.shape[3] < 3:
            raise ShapeError(f"image must be at least 3x3, got {image.shape[2]}x{image.shape[3]}")
        cfg = self.config
        maps = []
        x = image
        for n, (w, b) in enumerate(self.blocks, start=1):
            y = leaky_relu(instance_norm(conv2d(x, w, b, padding=1), cfg.norm_eps), cfg.slope)
            x = y if n == 1 else y + x
            maps.append(x)
        return maps

    def build_response_maps(self, features: list[Tensor]) -> Tensor:
        """h^n = instance_norm(conv1x1(M^n)), stacked to N x H x W."""
        if len(features) != self.config.n_layers:
            raise ShapeError(f"expected {self.config.n_layers} feature maps, got {len(features)}")
        layers = []
        for m, (w, b) in zip(features, self.response_heads):
            layers.append(instance_norm(conv2d(m, w, b), self.config.norm_eps)[0, 0])
        return stack(layers, axis=0)

    def orientation_maps(self, features: list[Tensor]) -> Tensor:
        """Per-layer angles theta^n = arctan2(sin, cos), N x H x W."""
        angles = []
        for m, (w, b) in zip(features, self.orientation_heads):
            sc = conv2d(m, w, b)[0]
            angles.append(arctan2(sc[0], sc[1]))
        return stack(angles, axis=0)

    def forward(self, image) -> DetectorOutputs:
        features = self.build_feature_maps(image)
        h = self.build_response_maps(features)
        score, prob, h_hat = fuse_score(h, self.config.window)
        orientation = fuse_orientation(self.orientation_maps(features), prob)
        scale = estimate_scale(prob)
        return DetectorOutputs(score, orientation, scale, prob, h, h_hat, features)

    __call__ = forward


# -- fusion (free functions so they can be tested on synthetic maps) -------------------------
def fuse_score(h: Tensor, window: int = 15) -> tuple[Tensor, Tensor, Tensor]:
    """Returns (S, Pr, h_hat) with S = sum_n h_hat^n * Pr^n."""
    h_hat = windowed_softmax(h, window)
    prob = scale_softmax(h_hat)
    score = (h_hat * prob).sum(axis=0)
    return score, prob, h_hat


def fuse_orientation(theta: Tensor, prob: Tensor) -> Tensor:
    # weighted sum of raw angles; not wrap-aware near +-pi
    return (as_tensor(theta) * prob).sum(axis=0)


def estimate_orientation(detector: RFDetector, features: list[Tensor], prob: Tensor) -> Tensor:
    return fuse_orientation(detector.orientation_maps(features), prob)


def estimate_scale(prob: Tensor) -> Tensor:
    """S-bar = sum_n (2n+1) Pr^n."""
    sizes = receptive_field_sizes(prob.shape[0]).astype(prob.dtype).reshape(-1, 1, 1)
    return (prob * Tensor(sizes)).sum(axis=0)


def select_keypoints(out: DetectorOutputs, k: int, nms_radius: int = 0, border: int = 8) -> list[Keypoint]:
    """Top-k pixels of the score map, ties broken in row-major order.

    Pixels within ``border`` of the image edge are skipped; with
    ``nms_radius`` > 0 a pixel within that Chebyshev distance of an already
    selected keypoint is suppressed.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    score = np.asarray(out.score.data)
    theta = np.asarray(out.orientation.data)
    scale = np.asarray(out.scale.data)
    height, width = score.shape
    eligible = np.zeros_like(score, dtype=bool)
    if height > 2 * border and width > 2 * border:
        eligible[border : height - border, border : width - border] = True
    order = np.argsort(-score.ravel(), kind="stable")
    order = order[eligible.ravel()[order]]

    picked: list[Keypoint] = []
    suppressed = np.zeros_like(eligible)
    for idx in order:
        y, x = divmod(int(idx), width)
        if nms_radius > 0:
            if suppressed[y, x]:
                continue
            suppressed[max(0, y - nms_radius) : y + nms_radius + 1, max(0, x - nms_radius) : x + nms_radius + 1] = True
        picked.append(Keypoint(float(x), float(y), float(score[y, x]), float(theta[y, x]), float(scale[y, x])))
        if len(picked) == k:
            break
    return picked


def keypoint_array(kps: list[Keypoint]) -> np.ndarray:
    return np.array([[kp.x, kp.y] for kp in kps], dtype=np.float64).reshape(-1, 2)
