"""Score, patch, description and detector losses."""
from __future__ import annotations

import collections
import logging
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .descriptor import RFDescriptor, distance_matrix, paired_distance
from .detector import DetectorOutputs
from .engine import Tensor, as_tensor, concatenate, minimum, no_grad, where
from .geometry import coverage_mask, crop_patches, warp_map, warp_points

log = logging.getLogger(__name__)


class DegenerateBatchError(RuntimeError):
    """No usable correspondence survived between the two images."""


@dataclass
class LossConfig:
    k: int = 512
    sigma: float = 0.5
    neighbor_radius: float = 5.0
    margin: float = 1.0
    lambda_score: float = 1.0
    lambda_patch: float = 1.0

    def __post_init__(self):
        for name in ("k", "sigma", "margin", "lambda_score", "lambda_patch"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.neighbor_radius < 0:
            raise ValueError(f"neighbor_radius must be >= 0, got {self.neighbor_radius}")


# -- score loss --------------------------------------------------------------------------
def top_k_pixels(values: np.ndarray, k: int, eligible: Optional[np.ndarray] = None) -> np.ndarray:
    """(x, y) of the k largest eligible entries, ties broken row-major."""
    flat = values.ravel()
    order = np.argsort(-flat, kind="stable")
    if eligible is not None:
        order = order[eligible.ravel()[order]]
    order = order[:k]
    ys, xs = np.divmod(order, values.shape[1])
    return np.stack([xs, ys], axis=1)


def render_gaussians(shape: tuple[int, int], points, sigma: float) -> np.ndarray:
    """Unit-peak Gaussians truncated at ceil(3 sigma), merged by max."""
    out = np.zeros(shape, dtype=np.float32)
    radius = int(math.ceil(3 * sigma))
    offs = np.arange(-radius, radius + 1)
    kernel = np.exp(-(offs[:, None] ** 2 + offs[None, :] ** 2) / (2 * sigma * sigma)).astype(np.float32)
    height, width = shape
    for x, y in np.asarray(points, dtype=np.int64).reshape(-1, 2):
        y0, y1 = max(0, y - radius), min(height, y + radius + 1)
        x0, x1 = max(0, x - radius), min(width, x + radius + 1)
        ky, kx = y0 - (y - radius), x0 - (x - radius)
        patch = kernel[ky : ky + y1 - y0, kx : kx + x1 - x0]
        np.maximum(out[y0:y1, x0:x1], patch, out=out[y0:y1, x0:x1])
    return out


def make_ground_truth(score_j, h_ji, k: int, sigma: float = 0.5, out_shape=None) -> tuple[np.ndarray, np.ndarray]:
    """Ground-truth score map for image i from the other branch's score map.

    The score map of image j is warped into frame i, the k strongest pixels
    with source coverage and a positive warped score are kept, and a Gaussian
    is placed at each.  Returns (G_i, kept points as K x 2 (x, y)).  The
    result carries no gradient.
    """
    s = np.asarray(getattr(score_j, "data", score_j), dtype=np.float32)
    shape = tuple(out_shape) if out_shape is not None else s.shape
    with no_grad():
        warped = warp_map(h_ji, Tensor(s), shape).data
    eligible = coverage_mask(h_ji, s.shape, shape) & (warped > 0)
    kept = top_k_pixels(warped, k, eligible)
    return render_gaussians(shape, kept, sigma), kept


def score_loss(score_i, target) -> Tensor:
    """Mean squared error between a score map and its ground truth."""
    score_i = as_tensor(score_i)
    target = np.asarray(getattr(target, "data", target))
    if score_i.shape != target.shape:
        raise ValueError(f"score map shape {score_i.shape} != ground truth shape {target.shape}")
    diff = score_i - Tensor(target.astype(score_i.dtype))
    return (diff * diff).mean()


# -- correspondences ---------------------------------------------------------------------
@dataclass
class CorrespondenceBatch:
    centers_i: np.ndarray
    centers_j: np.ndarray
    orientation_i: Tensor
    scale_i: Tensor
    orientation_j: Tensor
    scale_j: Tensor
    patches_i: Tensor
    patches_j: Tensor
    h_ij: np.ndarray
    desc_i: Optional[Tensor] = None
    desc_j: Optional[Tensor] = None

    def __len__(self) -> int:
        return len(self.centers_i)


def gather(map2d: Tensor, pixels: np.ndarray) -> Tensor:
    """Values of an H x W tensor at integer (x, y) pixels."""
    pixels = np.asarray(pixels, dtype=np.int64)
    return map2d[(pixels[:, 1], pixels[:, 0])]


def build_correspondences(
    kept,
    h_ij,
    det_i: DetectorOutputs,
    det_j: DetectorOutputs,
    image_i,
    image_j,
    patch_size: int = 32,
    crop_factor: float = 1.0,
    descriptor: Optional[RFDescriptor] = None,
    mode: str = "eval",
) -> CorrespondenceBatch:
    """Pair each kept point of image i with its warped location in image j.

    Orientation and scale of each side are read from that image's own maps
    (at the rounded pixel for the counterpart).  Pairs whose counterpart leaves
    image j are dropped.  If ``descriptor`` is given the patches are described.
    """
    kept = np.asarray(kept, dtype=np.int64).reshape(-1, 2)
    hj, wj = det_j.shape
    warped, valid = warp_points(h_ij, kept) if len(kept) else (np.zeros((0, 2)), np.zeros(0, bool))
    safe = np.where(valid[:, None], warped, -1.0)
    inside = valid & (safe[:, 0] >= 0) & (safe[:, 0] <= wj - 1) & (safe[:, 1] >= 0) & (safe[:, 1] <= hj - 1)
    if not np.any(inside):
        raise DegenerateBatchError("no kept keypoint lands inside the second image")
    anchors = kept[inside]
    centers_j = warped[inside]
    pix_j = np.clip(np.rint(centers_j).astype(np.int64), [0, 0], [wj - 1, hj - 1])

    orientation_i = gather(det_i.orientation, anchors)
    scale_i = gather(det_i.scale, anchors)
    orientation_j = gather(det_j.orientation, pix_j)
    scale_j = gather(det_j.scale, pix_j)
    centers_i = anchors.astype(np.float64)
    patches_i = crop_patches(_image(image_i), centers_i, orientation_i, scale_i, patch_size, crop_factor)
    patches_j = crop_patches(_image(image_j), centers_j, orientation_j, scale_j, patch_size, crop_factor)
    batch = CorrespondenceBatch(
        centers_i, centers_j, orientation_i, scale_i, orientation_j, scale_j, patches_i, patches_j, np.asarray(h_ij)
    )
    if descriptor is not None:
        describe_batch(batch, descriptor, mode)
    return batch


def _image(img) -> Tensor:
    img = as_tensor(img)
    return img.reshape(1, img.shape[-2], img.shape[-1])


def describe_batch(batch: CorrespondenceBatch, descriptor: RFDescriptor, mode: str = "eval", detach: bool = False):
    """Describe both sides in one call so batch statistics are shared."""
    pi, pj = batch.patches_i, batch.patches_j
    if detach:
        pi, pj = pi.detach(), pj.detach()
    k = len(batch)
    desc = descriptor(concatenate([pi, pj], axis=0), mode)
    batch.desc_i = desc[:k]
    batch.desc_j = desc[k:]
    return batch


# -- descriptor-side losses --------------------------------------------------------------
def patch_loss(batch: CorrespondenceBatch) -> Tensor:
    """Mean distance between corresponding descriptors."""
    if batch.desc_i is None or batch.desc_j is None:
        raise ValueError("correspondence batch has no descriptors; call describe_batch first")
    return paired_distance(batch.desc_i, batch.desc_j).mean()


def neighbor_masks(centers_i, centers_j, radius: float) -> tuple[np.ndarray, np.ndarray]:
    """Boolean K x K masks of candidates allowed as negatives.

    row_ok[k, n] (negatives for anchor k among j-side descriptors): n != k and the
    j-side centroids of k and n are more than ``radius`` apart.
    col_ok[m, k] (negatives for counterpart k among i-side descriptors): m != k
    and the i-side centroids of m and k are more than ``radius`` apart.
    """
    ci = np.asarray(centers_i, dtype=np.float64)
    cj = np.asarray(centers_j, dtype=np.float64)
    dj = np.sqrt(((cj[:, None, :] - cj[None, :, :]) ** 2).sum(-1))
    di = np.sqrt(((ci[:, None, :] - ci[None, :, :]) ** 2).sum(-1))
    eye = np.eye(len(ci), dtype=bool)
    return (dj > radius) & ~eye, (di > radius) & ~eye


def description_loss(
    desc_i,
    desc_j,
    centers_i,
    centers_j,
    radius: float = 5.0,
    margin: float = 1.0,
    stats: Optional[collections.Counter] = None,
) -> Tensor:
    """Hardest-negative hinge loss with the neighbor mask.

    Anchors whose every negative candidate is masked contribute 0 and are
    counted under ``stats["fully_masked"]``.
    """
    desc_i, desc_j = as_tensor(desc_i), as_tensor(desc_j)
    k = desc_i.shape[0]
    if k < 2:
        raise ValueError(f"description loss needs at least 2 correspondences, got {k}")
    dist = distance_matrix(desc_i, desc_j)
    row_ok, col_ok = neighbor_masks(centers_i, centers_j, radius)
    row_cand = np.where(row_ok, dist.data, np.inf)
    col_cand = np.where(col_ok, dist.data, np.inf)
    n_idx = row_cand.argmin(axis=1)
    m_idx = col_cand.argmin(axis=0)
    has_row = np.isfinite(row_cand[np.arange(k), n_idx])
    has_col = np.isfinite(col_cand[m_idx, np.arange(k)])
    usable = has_row | has_col
    # an empty side falls back to the other side's candidate
    n_idx = np.where(has_row, n_idx, 0)
    m_idx = np.where(has_col, m_idx, 0)
    ar = np.arange(k)
    positive = dist[(ar, ar)]
    row_neg = dist[(ar, n_idx)]
    col_neg = dist[(m_idx, ar)]
    row_neg = where(has_row, row_neg, col_neg)
    col_neg = where(has_col, col_neg, row_neg)
    negative = minimum(row_neg, col_neg)

    fully_masked = int((~usable).sum())
    if fully_masked:
        log.debug("%d anchors had every negative masked", fully_masked)
        if stats is not None:
            stats["fully_masked"] += fully_masked
    hinge = (positive - negative + margin).clamp_min(0.0) * Tensor(usable.astype(desc_i.dtype))
    return hinge.sum() * (1.0 / k)


def detector_loss(score, patch, lambda_score: float = 1.0, lambda_patch: float = 1.0):
    return score * lambda_score + patch * lambda_patch
