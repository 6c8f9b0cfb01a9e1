"""Finite-difference verification of reverse-mode gradients."""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Optional

import numpy as np

from .tensor import Tensor


@contextlib.contextmanager
def promoted(tensors: Iterable[Tensor]):
    """Temporarily run the given tensors in float64; restores data and grads on exit."""
    tensors = list(tensors)
    saved = [(t.data, t.grad) for t in tensors]
    try:
        for t in tensors:
            t.data = t.data.astype(np.float64)
            t.grad = None
        yield tensors
    finally:
        for t, (data, grad) in zip(tensors, saved):
            t.data, t.grad = data, grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    """|a - n| / max(|a|, |n|, floor); the floor keeps exactly-zero gradients from dividing roundoff by zero."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    eps: float = 1e-3,
    max_elements: Optional[int] = None,
    rng: Optional[np.random.Generator] = None,
    floor: float = 1e-8,
) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``f`` maps ``x`` to a scalar tensor and must rebuild its graph on every
    call.  ``x`` is evaluated in float64 for the duration of the check and may
    also be captured by ``f`` through a closure (e.g. a model parameter).
    With ``max_elements`` only a random subset of coordinates is probed.
    ``floor`` is the smallest denominator of the relative error; raise it for
    parameters whose true gradient is exactly zero (e.g. a bias followed by a
    normalization), where the central difference returns pure roundoff.
    """
    was_required = x.requires_grad
    x.requires_grad = True
    try:
        with promoted([x]):
            out = f(x)
            out.backward()
            analytic = np.zeros(x.shape) if x.grad is None else x.grad.astype(np.float64)

            flat = x.data.reshape(-1)
            indices = np.arange(flat.size)
            if max_elements is not None and flat.size > max_elements:
                rng = rng or np.random.default_rng(0)
                indices = np.sort(rng.choice(flat.size, size=max_elements, replace=False))

            numeric = np.empty(len(indices))
            for k, i in enumerate(indices):
                orig = flat[i]
                flat[i] = orig + eps
                up = float(f(x).data)
                flat[i] = orig - eps
                down = float(f(x).data)
                flat[i] = orig
                numeric[k] = (up - down) / (2 * eps)
            return float(relative_error(analytic.reshape(-1)[indices], numeric, floor).max(initial=0.0))
    finally:
        x.requires_grad = was_required
