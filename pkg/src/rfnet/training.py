"""Siamese training loop.

Each direction runs the detector on both images, turns the second branch's
score map into ground truth for the first, trains the descriptor on the
resulting correspondences and then the detector on score + patch loss.  An
iteration does both directions of one pair.
"""
from __future__ import annotations

import collections
import logging
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional

import numpy as np

from .config import RunConfig
from .descriptor import RFDescriptor
from .detector import RFDetector
from .engine import AdamState, Parameter, adam_step
from .geometry import invert_homography
from .losses import (
    DegenerateBatchError,
    build_correspondences,
    describe_batch,
    description_loss,
    detector_loss,
    make_ground_truth,
    patch_loss,
    score_loss,
)

log = logging.getLogger(__name__)

LOSS_KEYS = ("score", "patch", "description", "detector")


@dataclass
class TrainState:
    config: RunConfig
    detector: RFDetector
    descriptor: RFDescriptor
    det_opt: AdamState
    des_opt: AdamState
    iteration: int = 0
    stats: collections.Counter = field(default_factory=collections.Counter)

    @classmethod
    def create(cls, config: Optional[RunConfig] = None) -> "TrainState":
        config = config or RunConfig()
        rng = np.random.default_rng(config.train.seed)
        detector = RFDetector(config.detector, rng)
        descriptor = RFDescriptor(config.descriptor, rng)
        lr = config.train.lr
        return cls(config, detector, descriptor, AdamState(lr=lr), AdamState(lr=lr))

    def parameters(self) -> list[Parameter]:
        return self.detector.parameters() + self.descriptor.parameters()

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None


@dataclass
class DirectionRecord:
    homography: np.ndarray
    losses: Optional[dict] = None
    skipped: str = ""


@dataclass
class IterationRecord:
    iteration: int
    directions: list

    @property
    def flagged(self) -> bool:
        return all(d.losses is None for d in self.directions)


def _as_image(img) -> np.ndarray:
    return np.asarray(getattr(img, "pixels", img), dtype=np.float32)


def train_direction(state: TrainState, img_a, img_b, h_ab) -> dict:
    """One direction: image b supervises image a.  Returns the four loss values."""
    cfg = state.config
    lc = cfg.loss
    img_a, img_b = _as_image(img_a), _as_image(img_b)
    detector, descriptor = state.detector, state.descriptor
    patch_size = cfg.descriptor.patch_size

    det_a = detector(img_a)
    det_b = detector(img_b)
    g_a, kept = make_ground_truth(det_b.score, invert_homography(h_ab), lc.k, lc.sigma, det_a.shape)
    if len(kept) == 0:
        raise DegenerateBatchError("ground truth has no keypoints inside the first image")

    def correspondences(da, db):
        return build_correspondences(kept, h_ab, da, db, img_a, img_b, patch_size, cfg.train.crop_factor)

    batch = correspondences(det_a, det_b)
    if len(batch) < 2:
        raise DegenerateBatchError(f"only {len(batch)} correspondence(s) survived")

    desc_value = float("nan")
    for step in range(cfg.train.desc_steps_per_iter):
        state.zero_grad()
        describe_batch(batch, descriptor, "train", detach=True)
        loss = description_loss(
            batch.desc_i, batch.desc_j, batch.centers_i, batch.centers_j, lc.neighbor_radius, lc.margin, state.stats
        )
        if step == 0:
            desc_value = float(loss.data)
        loss.backward()
        adam_step(descriptor.parameters(), state.des_opt)

    score_value = patch_value = det_value = float("nan")
    mode = "eval" if descriptor.has_running_stats else "batch"
    for step in range(cfg.train.det_steps_per_iter):
        if step > 0 or not cfg.train.reuse_batch:
            det_a, det_b = detector(img_a), detector(img_b)
            batch = correspondences(det_a, det_b)
        state.zero_grad()
        describe_batch(batch, descriptor, mode)
        l_score = score_loss(det_a.score, g_a)
        l_patch = patch_loss(batch)
        l_det = detector_loss(l_score, l_patch, lc.lambda_score, lc.lambda_patch)
        if step == 0:
            score_value, patch_value, det_value = float(l_score.data), float(l_patch.data), float(l_det.data)
        l_det.backward()
        adam_step(detector.parameters(), state.det_opt)
    state.zero_grad()

    if cfg.train.det_steps_per_iter == 0:
        with_grad = describe_batch(batch, descriptor, mode)
        score_value = float(score_loss(det_a.score, g_a).data)
        patch_value = float(patch_loss(with_grad).data)
        det_value = lc.lambda_score * score_value + lc.lambda_patch * patch_value
    return {"score": score_value, "patch": patch_value, "description": desc_value, "detector": det_value}


def train_iteration(state: TrainState, pair) -> IterationRecord:
    """Train on (I_i, I_j, H_ij) and then on the swapped pair (I_j, I_i, H_ji)."""
    img_i, img_j, h_ij = pair
    h_ji = invert_homography(h_ij)
    records = []
    for a, b, h in ((img_i, img_j, h_ij), (img_j, img_i, h_ji)):
        try:
            records.append(DirectionRecord(h, train_direction(state, a, b, h)))
        except DegenerateBatchError as exc:
            log.info("skipping direction at iteration %d: %s", state.iteration, exc)
            state.stats["skipped_directions"] += 1
            records.append(DirectionRecord(h, None, str(exc)))
    state.iteration += 1
    record = IterationRecord(state.iteration, records)
    if record.flagged:
        log.warning("iteration %d: both directions skipped", state.iteration)
        state.stats["flagged_iterations"] += 1
    return record


def pair_schedule(n_pairs: int, seed: int, start: int = 0) -> Iterable[int]:
    """Pair indices, reshuffled every epoch from the run seed; resumable at ``start``."""
    if n_pairs < 1:
        raise ValueError("training needs at least one pair")
    epoch, offset = divmod(start, n_pairs)
    while True:
        order = np.random.default_rng([seed, epoch]).permutation(n_pairs)
        for idx in order[offset:]:
            yield int(idx)
        epoch, offset = epoch + 1, 0


def mean_losses(record: IterationRecord) -> dict:
    rows = [d.losses for d in record.directions if d.losses is not None]
    if not rows:
        return {k: float("nan") for k in LOSS_KEYS}
    return {k: float(np.mean([r[k] for r in rows])) for k in LOSS_KEYS}


def train(
    state: TrainState,
    pairs: list,
    iterations: int,
    callback: Optional[Callable[[TrainState, IterationRecord], None]] = None,
) -> list[IterationRecord]:
    """Run ``iterations`` more iterations over ``pairs``."""
    schedule = pair_schedule(len(pairs), state.config.train.seed, state.iteration)
    history = []
    for _ in range(iterations):
        record = train_iteration(state, pairs[next(schedule)])
        history.append(record)
        if callback is not None:
            callback(state, record)
    return history
