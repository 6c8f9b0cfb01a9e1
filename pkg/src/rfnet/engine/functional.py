"""Differentiable neural-network primitives on top of :class:`Tensor`."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .tensor import ShapeError, Tensor, as_tensor


# ---------------------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------------------
def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """(B, C, H, W) -> (C*kh*kw, B*ho*wo) so the convolution is a single GEMM."""
    b, c = x.shape[:2]
    xt = x.transpose(1, 0, 2, 3)
    cols = np.empty((c, kh, kw, b, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xt[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(c * kh * kw, b * ho * wo)


def _col2im(cols: np.ndarray, shape: tuple, kh: int, kw: int, stride: int, ho: int, wo: int) -> np.ndarray:
    b, c, h, w = shape
    out = np.zeros((c, b, h, w), dtype=cols.dtype)
    cols = cols.reshape(c, kh, kw, b, ho, wo)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += cols[:, i, j]
    return out.transpose(1, 0, 2, 3)


def conv2d(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation with zero padding (B x Cin x H x W -> B x Cout x H' x W')."""
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be B x C x H x W, got shape {x.shape}")
    if weight.ndim != 4:
        raise ShapeError(f"conv2d weight must be Cout x Cin x kh x kw, got shape {weight.shape}")
    b, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if wcin != cin:
        raise ShapeError(f"conv2d channel mismatch: input has Cin={cin}, weight expects Cin={wcin}")
    if stride < 1:
        raise ShapeError(f"conv2d stride must be positive, got {stride}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp:
        raise ShapeError(f"conv2d kernel height {kh} exceeds padded input height {hp}")
    if kw > wp:
        raise ShapeError(f"conv2d kernel width {kw} exceeds padded input width {wp}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d bias must have shape ({cout},), got {bias.shape}")

    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, kh, kw, stride, ho, wo)
    wmat = weight.data.reshape(cout, -1)
    out = wmat @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(cout, b, ho, wo).transpose(1, 0, 2, 3))

    def backward(g):
        g2 = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gw = (g2 @ cols.T).reshape(weight.shape)
        gx = None
        if x.requires_grad:
            gx = _col2im(wmat.T @ g2, xp.shape, kh, kw, stride, ho, wo)
            if padding:
                gx = gx[:, :, padding : padding + h, padding : padding + w]
        grads = [gx, gw]
        if bias is not None:
            grads.append(g2.sum(axis=1))
        return grads

    parents = (x, weight) if bias is None else (x, weight, bias)
    return Tensor._make(out, parents, backward, "conv2d")


# ---------------------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------------------
def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Per-(sample, channel) standardization without affine parameters."""
    if x.ndim != 4:
        raise ShapeError(f"instance_norm expects B x C x H x W, got shape {x.shape}")
    count = x.shape[2] * x.shape[3]
    if count < 2:
        raise ShapeError(f"instance_norm needs H*W >= 2, got H*W={count}")
    xd = x.data.astype(np.float64)
    mu = xd.mean(axis=(2, 3), keepdims=True)
    centered = xd - mu
    var = (centered**2).mean(axis=(2, 3), keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv_std
    dtype = x.dtype

    def backward(g):
        g = g.astype(np.float64)
        gsum = g.sum(axis=(2, 3), keepdims=True)
        gdot = (g * xhat).sum(axis=(2, 3), keepdims=True)
        return ((inv_std / count) * (count * g - gsum - xhat * gdot)).astype(dtype),

    return Tensor._make(xhat.astype(dtype), (x,), backward, "instance_norm")


@dataclass
class BatchNormState:
    """Running statistics of one batch-norm layer."""

    channels: int
    momentum: float = 0.1
    eps: float = 1e-5
    running_mean: np.ndarray = field(default=None)
    running_var: np.ndarray = field(default=None)
    tracked: bool = False

    def __post_init__(self):
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channels, dtype=np.float32)
        if self.running_var is None:
            self.running_var = np.ones(self.channels, dtype=np.float32)


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, training: bool) -> Tensor:
    """Batch normalization over every axis except channels (axis 1).

    Training mode normalizes with the biased batch statistics and folds them
    into the running averages; eval mode uses the running averages.
    """
    if x.ndim < 2 or x.shape[1] != state.channels:
        raise ShapeError(f"batch_norm expects {state.channels} channels on axis 1, got shape {x.shape}")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, -1) + (1,) * (x.ndim - 2)
    count = x.data.size // state.channels
    dtype = np.result_type(x.dtype, gamma.dtype, beta.dtype)
    xd = x.data

    if training:
        if count < 2:
            raise ShapeError(f"batch_norm in train mode needs >= 2 values per channel, got {count}")
        mu = xd.mean(axis=axes, dtype=np.float64)
        var = np.square(xd - mu.astype(xd.dtype).reshape(bshape)).mean(axis=axes, dtype=np.float64)
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mu).astype(np.float32)
        state.running_var = ((1 - m) * state.running_var + m * var).astype(np.float32)
        state.tracked = True
    else:
        if not state.tracked:
            raise RuntimeError("batch_norm eval mode used before any running-statistics update")
        mu = state.running_mean.astype(np.float64)
        var = state.running_var.astype(np.float64)

    inv_std = (1.0 / np.sqrt(var + state.eps)).astype(dtype).reshape(bshape)
    xhat = (xd - mu.astype(dtype).reshape(bshape)) * inv_std
    gam = gamma.data.astype(dtype).reshape(bshape)
    out = gam * xhat + beta.data.astype(dtype).reshape(bshape)

    def backward(g):
        ggamma = (g * xhat).sum(axis=axes, dtype=np.float64)
        gbeta = g.sum(axis=axes, dtype=np.float64)
        gxhat = g * gam
        if training:
            s1 = gxhat.sum(axis=axes, keepdims=True, dtype=np.float64).astype(dtype)
            s2 = (gxhat * xhat).sum(axis=axes, keepdims=True, dtype=np.float64).astype(dtype)
            gx = (inv_std / count) * (count * gxhat - s1 - xhat * s2)
        else:
            gx = gxhat * inv_std
        return gx.astype(x.dtype), ggamma.astype(gamma.dtype), gbeta.astype(beta.dtype)

    return Tensor._make(out, (x, gamma, beta), backward, "batch_norm")


# ---------------------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------------------
def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    # at exactly 0 the negative-side slope is used as the subgradient
    negative = x.data <= 0
    slope = x.dtype.type(slope)
    out = np.where(negative, x.data * slope, x.data)
    return Tensor._make(out, (x,), lambda g: (np.where(negative, g * slope, g),), "leaky_relu")


def relu(x: Tensor) -> Tensor:
    return leaky_relu(x, 0.0)


def arctan2(s: Tensor, c: Tensor) -> Tensor:
    sd, cd = s.data, c.data
    out = np.arctan2(sd, cd)

    def backward(g):
        r2 = sd * sd + cd * cd
        r2 = np.where(r2 > 0, r2, 1.0)
        return g * cd / r2, -g * sd / r2

    return Tensor._make(out, (s, c), backward, "arctan2")


# ---------------------------------------------------------------------------------------
# softmaxes
# ---------------------------------------------------------------------------------------
def _running_max(a: np.ndarray, r: int, axis: int) -> np.ndarray:
    """Max over a centered window of radius r along ``axis``; ``a`` is padded by r with -inf."""
    n = a.shape[axis] - 2 * r
    out = np.take(a, range(0, n), axis=axis)
    for k in range(1, 2 * r + 1):
        out = np.maximum(out, np.take(a, range(k, k + n), axis=axis))
    return out


def windowed_softmax(h: Tensor, window: int = 15) -> Tensor:
    """Softmax over a sliding window x window x N neighborhood, evaluated at the center.

    ``h`` is N x H x W.  Positions outside the image contribute nothing to the
    denominator.  Each center subtracts its own in-window maximum.
    """
    if window < 1 or window % 2 == 0:
        raise ValueError(f"window must be an odd positive integer, got {window}")
    if h.ndim != 3:
        raise ShapeError(f"windowed_softmax expects N x H x W, got shape {h.shape}")
    n, height, width = h.shape
    r = window // 2
    hd = h.data.astype(np.float64)

    # per-pixel max and layer-summed exponentials, both stable
    a = hd.max(axis=0)
    s = np.exp(hd - a).sum(axis=0)
    apad = np.full((height + 2 * r, width + 2 * r), -np.inf)
    apad[r : r + height, r : r + width] = a
    spad = np.zeros_like(apad)
    spad[r : r + height, r : r + width] = s

    m = _running_max(_running_max(apad, r, 0), r, 1)
    z = np.zeros((height, width))
    for dy in range(window):
        for dx in range(window):
            ash = apad[dy : dy + height, dx : dx + width]
            z += spad[dy : dy + height, dx : dx + width] * np.exp(ash - m)
    out = np.exp(hd - m) / z
    dtype = h.dtype

    def backward(g):
        g = g.astype(np.float64)
        coef = (g * out).sum(axis=0) / z
        cpad = np.zeros((height + 2 * r, width + 2 * r))
        cpad[r : r + height, r : r + width] = coef
        mpad = np.full_like(cpad, np.inf)
        mpad[r : r + height, r : r + width] = m
        acc = np.zeros((height, width))
        for dy in range(window):
            for dx in range(window):
                acc += cpad[dy : dy + height, dx : dx + width] * np.exp(a - mpad[dy : dy + height, dx : dx + width])
        return (g * out - np.exp(hd - a) * acc).astype(dtype),

    return Tensor._make(out.astype(dtype), (h,), backward, "windowed_softmax")


def scale_softmax(h: Tensor) -> Tensor:
    """Softmax across the leading (layer) axis, independently per pixel."""
    hd = h.data.astype(np.float64)
    e = np.exp(hd - hd.max(axis=0, keepdims=True))
    p = e / e.sum(axis=0, keepdims=True)
    dtype = h.dtype

    def backward(g):
        g = g.astype(np.float64)
        return (p * (g - (g * p).sum(axis=0, keepdims=True))).astype(dtype),

    return Tensor._make(p.astype(dtype), (h,), backward, "scale_softmax")


def l2_normalize(v: Tensor, eps: float = 1e-8) -> Tensor:
    """Scale each row to unit Euclidean norm: v / max(||v||, eps).

    Rows with norm above ``eps`` come out exactly unit length (up to rounding),
    which keeps the self-distance sqrt(2 - 2 a.a) at zero.
    """
    if v.ndim != 2:
        raise ShapeError(f"l2_normalize expects K x D, got shape {v.shape}")
    vd = v.data.astype(np.float64)
    norm = np.sqrt((vd * vd).sum(axis=1, keepdims=True))
    big = norm > eps
    denom = np.where(big, norm, eps)
    out = vd / denom

    def backward(g):
        g = g.astype(np.float64)
        proj = (g * out).sum(axis=1, keepdims=True)
        return (np.where(big, g - out * proj, g) / denom).astype(v.dtype),

    return Tensor._make(out.astype(v.dtype), (v,), backward, "l2_normalize")


# ---------------------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------------------
def bilinear_sample(fmap: Tensor, grid: Tensor) -> Tensor:
    """Sample a C x H x W map at P (x, y) pixel positions, giving C x P.

    Positions outside [0, W-1] x [0, H-1] read as 0 and pass no gradient.
    """
    fmap, grid = as_tensor(fmap), as_tensor(grid)
    if fmap.ndim != 3:
        raise ShapeError(f"bilinear_sample map must be C x H x W, got shape {fmap.shape}")
    if grid.ndim != 2 or grid.shape[1] != 2:
        raise ShapeError(f"bilinear_sample grid must be P x 2, got shape {grid.shape}")
    c, h, w = fmap.shape
    md = fmap.data
    x = grid.data[:, 0].astype(np.float64)
    y = grid.data[:, 1].astype(np.float64)
    valid = (x >= 0) & (x <= w - 1) & (y >= 0) & (y <= h - 1)
    xc = np.where(valid, x, 0.0)
    yc = np.where(valid, y, 0.0)
    x0 = np.clip(np.floor(xc).astype(np.int64), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(yc).astype(np.int64), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    wx = xc - x0
    wy = yc - y0

    v00 = md[:, y0, x0].astype(np.float64)
    v01 = md[:, y0, x1].astype(np.float64)
    v10 = md[:, y1, x0].astype(np.float64)
    v11 = md[:, y1, x1].astype(np.float64)
    w00 = (1 - wx) * (1 - wy) * valid
    w01 = wx * (1 - wy) * valid
    w10 = (1 - wx) * wy * valid
    w11 = wx * wy * valid
    out = v00 * w00 + v01 * w01 + v10 * w10 + v11 * w11

    def backward(g):
        g = g.astype(np.float64)
        gmap = None
        if fmap.requires_grad:
            gmap = np.zeros((c, h * w))
            for yy, xx, ww in ((y0, x0, w00), (y0, x1, w01), (y1, x0, w10), (y1, x1, w11)):
                lin = yy * w + xx
                for ch in range(c):
                    gmap[ch] += np.bincount(lin, weights=g[ch] * ww, minlength=h * w)
            gmap = gmap.reshape(c, h, w).astype(fmap.dtype)
        ggrid = None
        if grid.requires_grad:
            gx = ((1 - wy) * (v01 - v00) + wy * (v11 - v10)) * g
            gy = ((1 - wx) * (v10 - v00) + wx * (v11 - v01)) * g
            ggrid = np.stack([gx.sum(axis=0), gy.sum(axis=0)], axis=1) * valid[:, None]
            ggrid = ggrid.astype(grid.dtype)
        return gmap, ggrid

    dtype = np.result_type(fmap.dtype, grid.dtype)
    return Tensor._make(out.astype(dtype), (fmap, grid), backward, "bilinear_sample")
