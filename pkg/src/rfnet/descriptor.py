"""Patch descriptor network and the unit-descriptor distance."""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .detector import conv_param
from .engine import (
    BatchNormState,
    Parameter,
    ShapeError,
    Tensor,
    as_tensor,
    batch_norm,
    check_unique,
    conv2d,
    instance_norm,
    l2_normalize,
    no_grad,
    relu,
)

UNIT_TOL = 1e-4


@dataclass
class DescriptorConfig:
    """Layer layout; the last entry is the output dimension."""

    widths: tuple = (32, 32, 64, 64, 128, 128, 128)
    strides: tuple = (1, 1, 2, 1, 2, 1)
    patch_size: int = 32
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.strides = tuple(int(s) for s in self.strides)
        if len(self.widths) != 7 or len(self.strides) != 6:
            raise ValueError("descriptor needs exactly 7 conv widths and 6 strides")
        if self.final_kernel < 1 or self.patch_size % int(np.prod(self.strides)):
            raise ValueError(f"patch_size {self.patch_size} is not divisible by the total stride")

    @property
    def dim(self) -> int:
        return self.widths[-1]

    @property
    def final_kernel(self) -> int:
        return self.patch_size // int(np.prod(self.strides))


@dataclass
class DescriptorSet:
    descriptors: np.ndarray
    specs: list = field(default_factory=list)

    def __post_init__(self):
        if self.specs and len(self.specs) != len(self.descriptors):
            raise ValueError(f"{len(self.descriptors)} descriptors but {len(self.specs)} patch specs")

    def __len__(self) -> int:
        return len(self.descriptors)


class RFDescriptor:
    """Seven conv layers; batch norm and ReLU after the first six, L2 normalization at the end."""

    def __init__(self, config: Optional[DescriptorConfig] = None, rng: Optional[np.random.Generator] = None):
        self.config = config or DescriptorConfig()
        rng = rng if rng is not None else np.random.default_rng(1)
        cfg = self.config
        self.weights: list[Parameter] = []
        self.gammas: list[Parameter] = []
        self.betas: list[Parameter] = []
        self.bn_states: list[BatchNormState] = []
        cin = 1
        for i, cout in enumerate(cfg.widths, start=1):
            k = 3 if i < 7 else cfg.final_kernel
            self.weights.append(conv_param(rng, f"des.conv{i}.weight", cout, cin, k))
            if i < 7:
                self.gammas.append(Parameter(f"des.bn{i}.gamma", np.ones(cout)))
                self.betas.append(Parameter(f"des.bn{i}.beta", np.zeros(cout)))
                self.bn_states.append(BatchNormState(cout, cfg.bn_momentum, cfg.bn_eps))
            cin = cout
        check_unique(self.parameters())

    def parameters(self) -> list[Parameter]:
        out = list(self.weights)
        for g, b in zip(self.gammas, self.betas):
            out += [g, b]
        return out

    @property
    def has_running_stats(self) -> bool:
        return all(s.tracked for s in self.bn_states)

    def forward(self, patches, mode: str = "eval") -> Tensor:
        """K x 1 x P x P patches -> K x D unit descriptors.

        ``mode`` is "train" (batch statistics, running stats updated), "eval"
        (running statistics) or "batch" (batch statistics, running stats left
        untouched).  Each patch is standardized by its own mean and std first.
        """
        if mode not in ("train", "eval", "batch"):
            raise ValueError(f"unknown descriptor mode {mode!r}")
        patches = as_tensor(patches)
        p = self.config.patch_size
        if patches.ndim != 4 or patches.shape[1:] != (1, p, p):
            raise ShapeError(f"descriptor expects K x 1 x {p} x {p} patches, got shape {patches.shape}")
        x = instance_norm(patches, 1e-5)
        for i, w in enumerate(self.weights):
            if i < 6:
                x = conv2d(x, w, stride=self.config.strides[i], padding=1)
                state = self.bn_states[i] if mode != "batch" else copy.copy(self.bn_states[i])
                x = relu(batch_norm(x, self.gammas[i], self.betas[i], state, training=mode != "eval"))
            else:
                x = conv2d(x, w)
        return l2_normalize(x.reshape(x.shape[0], -1))

    __call__ = forward

    def describe(self, patches, specs: Sequence = (), mode: Optional[str] = None, chunk: int = 256) -> DescriptorSet:
        """Inference without gradients; ``mode`` defaults to eval once running stats exist."""
        if mode is None:
            mode = "eval" if self.has_running_stats else "batch"
        patches = as_tensor(patches)
        if mode != "eval":
            chunk = max(len(patches), 1)
        with no_grad():
            parts = [self.forward(patches[i : i + chunk], mode).data for i in range(0, len(patches), chunk)]
        desc = np.concatenate(parts) if parts else np.zeros((0, self.config.dim), dtype=np.float32)
        return DescriptorSet(desc, list(specs))


# -- distances ---------------------------------------------------------------------------
def _check_unit(v: np.ndarray, what: str) -> None:
    norms = np.linalg.norm(np.asarray(v, dtype=np.float64).reshape(-1, np.shape(v)[-1]), axis=1)
    bad = np.abs(norms - 1) > UNIT_TOL
    if np.any(bad):
        raise ValueError(f"{what} is not unit-norm (norm {norms[bad][0]:.6f})")


def descriptor_distance(a, b) -> float:
    """sqrt(2 - 2 a.b) for unit vectors; equals the Euclidean distance."""
    a = np.asarray(getattr(a, "data", a), dtype=np.float64).ravel()
    b = np.asarray(getattr(b, "data", b), dtype=np.float64).ravel()
    _check_unit(a, "first descriptor")
    _check_unit(b, "second descriptor")
    return float(np.sqrt(max(0.0, 2.0 - 2.0 * float(a @ b))))


def _sqrt_of_gap(dot: Tensor) -> Tensor:
    """sqrt(max(0, 2 - 2 dot)) with zero gradient where the distance vanishes."""
    d = np.sqrt(np.maximum(0.0, 2.0 - 2.0 * dot.data))
    safe = np.where(d > 1e-6, d, np.inf)
    return Tensor._make(d, (dot,), lambda g: (-g / safe,), "unit_distance")


def distance_matrix(da, db) -> Tensor:
    """Pairwise descriptor distances (K_a x K_b), differentiable."""
    da, db = as_tensor(da), as_tensor(db)
    return _sqrt_of_gap(da @ db.T)


def paired_distance(da, db) -> Tensor:
    """Row-wise distances d(da_k, db_k), length K, differentiable."""
    da, db = as_tensor(da), as_tensor(db)
    if da.shape != db.shape:
        raise ShapeError(f"paired descriptors differ in shape: {da.shape} vs {db.shape}")
    return _sqrt_of_gap((da * db).sum(axis=1))
