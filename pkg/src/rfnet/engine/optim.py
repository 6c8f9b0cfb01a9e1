"""Named parameters and the ADAM optimizer."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .tensor import Tensor


class Parameter(Tensor):
    """A named leaf tensor that always requires grad."""

    def __init__(self, name: str, value, dtype=np.float32):
        super().__init__(np.array(value, dtype=dtype), requires_grad=True, name=name)


def check_unique(params: Iterable[Parameter]) -> None:
    seen = set()
    for p in params:
        if p.name in seen:
            raise ValueError(f"duplicate parameter name {p.name!r}")
        seen.add(p.name)


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: Sequence[Parameter], state: AdamState, grads: Sequence[np.ndarray] | None = None) -> None:
    """One bias-corrected ADAM update, in place.

    ``grads`` defaults to each parameter's accumulated ``.grad``; a missing
    gradient counts as zero.
    """
    if grads is None:
        grads = [p.grad for p in params]
    if len(grads) != len(params):
        raise ValueError(f"got {len(grads)} gradients for {len(params)} parameters")
    grads = [np.zeros_like(p.data) if g is None else np.asarray(g) for p, g in zip(params, grads)]
    for p, g in zip(params, grads):
        if g.shape != p.shape:
            raise ValueError(f"gradient for {p.name!r} has shape {g.shape}, parameter has {p.shape}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for parameter {p.name!r}")

    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g in zip(params, grads):
        g = g.astype(np.float64)
        m = state.m.get(p.name, np.zeros(p.shape, dtype=np.float32)).astype(np.float64)
        v = state.v.get(p.name, np.zeros(p.shape, dtype=np.float32)).astype(np.float64)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.m[p.name] = m.astype(np.float32)
        state.v[p.name] = v.astype(np.float32)
        step = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        p.data = (p.data - step).astype(p.dtype)
