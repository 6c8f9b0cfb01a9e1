"""Homography algebra, map/point warping and oriented patch cropping.

Homographies are plain 3x3 float64 arrays mapping homogeneous source pixel
coordinates to destination coordinates.  Orientation is counter-clockwise as
seen on screen (image y axis pointing down).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import Tensor, as_tensor, bilinear_sample, stack

DET_EPS = 1e-12
W_EPS = 1e-9


class SingularHomographyError(ValueError):
    pass


def normalize_homography(h) -> np.ndarray:
    h = np.asarray(h, dtype=np.float64)
    if h.shape != (3, 3):
        raise ValueError(f"homography must be 3x3, got shape {h.shape}")
    if not np.all(np.isfinite(h)):
        raise ValueError("homography contains non-finite entries")
    if abs(np.linalg.det(h)) <= DET_EPS:
        raise SingularHomographyError(f"homography is singular (det={np.linalg.det(h):.3g})")
    if h[2, 2] != 0:
        h = h / h[2, 2]
    return h


def invert_homography(h) -> np.ndarray:
    return normalize_homography(np.linalg.inv(normalize_homography(h)))


def translation(tx: float, ty: float) -> np.ndarray:
    return np.array([[1.0, 0.0, tx], [0.0, 1.0, ty], [0.0, 0.0, 1.0]])


def parse_homography(text: str, source: str = "<string>") -> np.ndarray:
    """Parse nine whitespace-separated reals (row-major)."""
    tokens = text.split()
    if len(tokens) != 9:
        raise ValueError(f"{source}: expected 9 numbers in homography file, found {len(tokens)}")
    try:
        values = [float(t) for t in tokens]
    except ValueError as exc:
        raise ValueError(f"{source}: {exc}") from None
    return normalize_homography(np.array(values).reshape(3, 3))


def format_homography(h) -> str:
    h = np.asarray(h, dtype=np.float64)
    return "\n".join(" ".join(repr(float(v)) for v in row) for row in h) + "\n"


def warp_points(h, pts) -> tuple[np.ndarray, np.ndarray]:
    """Apply ``h`` to an array of (x, y) points.

    Returns the warped points and a validity mask; points whose homogeneous
    coordinate vanishes are invalid and come back as NaN.
    """
    h = normalize_homography(h)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
    homog = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.T
    w = homog[:, 2]
    valid = np.abs(w) >= W_EPS
    out = np.full((len(pts), 2), np.nan)
    out[valid] = homog[valid, :2] / w[valid, None]
    return out, valid


def warp_map(h, src, out_shape: tuple[int, int] | None = None) -> Tensor:
    """Inverse-warp an H x W map into the destination frame of ``h``.

    Each destination pixel reads ``src`` at h^-1 (x, y, 1); samples falling
    outside the source are 0.  Differentiable with respect to ``src``.
    """
    src = as_tensor(src)
    height, width = src.shape
    oh, ow = out_shape if out_shape is not None else (height, width)
    ys, xs = np.mgrid[0:oh, 0:ow]
    dst = np.stack([xs.ravel(), ys.ravel()], axis=1).astype(np.float64)
    back, valid = warp_points(invert_homography(h), dst)
    back[~valid] = -1.0
    return bilinear_sample(src.reshape(1, height, width), Tensor(back)).reshape(oh, ow)


def coverage_mask(h, src_shape: tuple[int, int], out_shape: tuple[int, int] | None = None) -> np.ndarray:
    """Destination pixels whose inverse-warped location lies inside the source."""
    height, width = src_shape
    oh, ow = out_shape if out_shape is not None else src_shape
    ys, xs = np.mgrid[0:oh, 0:ow]
    back, valid = warp_points(invert_homography(h), np.stack([xs.ravel(), ys.ravel()], axis=1))
    back = np.where(valid[:, None], back, -1.0)
    inside = valid & (back[:, 0] >= 0) & (back[:, 0] <= width - 1) & (back[:, 1] >= 0) & (back[:, 1] <= height - 1)
    return inside.reshape(oh, ow)


@dataclass
class PatchSpec:
    x: float
    y: float
    orientation: float = 0.0
    scale: float = 32.0
    patch_size: int = 32
    crop_factor: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"patch scale must be positive, got {self.scale}")
        if self.patch_size < 2:
            raise ValueError(f"patch_size must be >= 2, got {self.patch_size}")


def patch_offsets(patch_size: int) -> tuple[np.ndarray, np.ndarray]:
    """Unit-square sample offsets (u, v) at pixel centers, row-major over the patch."""
    t = (np.arange(patch_size) + 0.5) / patch_size - 0.5
    v, u = np.meshgrid(t, t, indexing="ij")
    return u.ravel(), v.ravel()


def crop_patches(image, centers, orientations, scales, patch_size: int = 32, crop_factor: float = 1.0) -> Tensor:
    """Crop K rotated, scaled square patches from a 1 x H x W image.

    ``centers`` is K x 2 (x, y); ``orientations`` and ``scales`` are length K
    and may be tensors, in which case gradients flow back into them.  Patch
    sample (u, v) in [-0.5, 0.5]^2 reads the image at
    center + R(orientation) (u, v) * crop_factor * scale.  Returns K x 1 x P x P.
    """
    image = as_tensor(image)
    if image.ndim == 2:
        image = image.reshape(1, *image.shape)
    theta = as_tensor(orientations)
    k = theta.size
    theta = theta.reshape(k, 1)
    side = as_tensor(scales).reshape(k, 1) * crop_factor
    dtype = np.result_type(theta.dtype, side.dtype)
    centers = centers if isinstance(centers, Tensor) else Tensor(np.asarray(centers).reshape(k, 2), dtype=dtype)
    u, v = patch_offsets(patch_size)
    u, v = Tensor(u[None, :], dtype=dtype), Tensor(v[None, :], dtype=dtype)
    cos, sin = theta.cos(), theta.sin()
    # counter-clockwise on screen with y pointing down
    gx = centers[:, 0:1] + side * (cos * u + sin * v)
    gy = centers[:, 1:2] + side * (cos * v - sin * u)
    grid = stack([gx.reshape(-1), gy.reshape(-1)], axis=1)
    samples = bilinear_sample(image, grid)
    return samples.reshape(k, 1, patch_size, patch_size)


def crop_patch(image, spec: PatchSpec) -> Tensor:
    """Single-patch form of :func:`crop_patches`; returns 1 x P x P."""
    patch = crop_patches(
        image,
        np.array([[spec.x, spec.y]]),
        np.array([spec.orientation]),
        np.array([spec.scale]),
        spec.patch_size,
        spec.crop_factor,
    )
    return patch.reshape(1, spec.patch_size, spec.patch_size)


def centroid_distance(p, q) -> float:
    return math.hypot(p.x - q.x, p.y - q.y)
