"""Desk-scale experiment setup shared by scripts/ and the acceptance tests."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .config import RunConfig
from .data import SynthParams, make_texture, standardize, synth_pair
from .descriptor import DescriptorConfig
from .training import TrainState, mean_losses, train

SMOKE_SIZE = 64
SMOKE_WIDTHS = (8, 8, 16, 16, 32, 32, 128)


def smoke_config(seed: int = 0, iterations: int = 500) -> RunConfig:
    """Narrow descriptor, 16-px patches and K=32 so one iteration takes well under a second."""
    cfg = RunConfig()
    cfg.train.lr = 1e-3
    cfg.train.seed = seed
    cfg.train.iterations = iterations
    cfg.loss.k = 32
    cfg.descriptor = DescriptorConfig(widths=SMOKE_WIDTHS, patch_size=16)
    cfg.data.width = cfg.data.height = SMOKE_SIZE
    return cfg


@dataclass
class PairSet:
    """A named list of synthetic pairs, shaped like a loaded sequence for evaluation."""

    name: str
    items: list

    def pairs(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


@dataclass
class SmokeCorpus:
    train: list
    held_out: list = field(default_factory=list)

    def held_out_sequences(self) -> list[PairSet]:
        return [PairSet(f"heldout{i}", [p]) for i, p in enumerate(self.held_out)]


def _pairs(rng, bases, count, params):
    out = []
    for i in range(count):
        img, warped, h = synth_pair(bases[i % len(bases)], rng, params)
        out.append((standardize(img), standardize(warped), h))
    return out


def smoke_corpus(
    seed: int = 0, n_train: int = 10, n_bases: int = 3, n_held_out: int = 5, size: int = SMOKE_SIZE
) -> SmokeCorpus:
    """Training pairs from ``n_bases`` textures; held-out pairs from textures never trained on."""
    rng = np.random.default_rng([seed, 7])
    params = SynthParams()
    bases = [make_texture(rng, (size, size)) for _ in range(n_bases)]
    train_pairs = _pairs(rng, bases, n_train, params)
    held_bases = [make_texture(rng, (size, size)) for _ in range(n_held_out)]
    held = _pairs(rng, held_bases, n_held_out, params)
    return SmokeCorpus(train_pairs, held)


def description_curve(history) -> np.ndarray:
    return np.array([mean_losses(r)["description"] for r in history], dtype=np.float64)


def loss_drop(curve: np.ndarray, window: int = 20) -> float:
    """Relative drop of the trailing ``window``-iteration mean vs the first ``window`` iterations."""
    curve = curve[np.isfinite(curve)]
    if len(curve) < 2 * window:
        raise ValueError(f"need at least {2 * window} finite losses, got {len(curve)}")
    first, last = curve[:window].mean(), curve[-window:].mean()
    return float((first - last) / first) if first > 0 else math.nan


def run_smoke(config: Optional[RunConfig] = None, corpus: Optional[SmokeCorpus] = None, callback=None):
    """Returns (untrained state, trained state, history)."""
    config = config or smoke_config()
    corpus = corpus or smoke_corpus(config.train.seed)
    untrained = TrainState.create(config)
    state = TrainState.create(config)
    history = train(state, corpus.train, config.train.iterations, callback)
    return untrained, state, history
