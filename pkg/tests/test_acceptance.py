"""Acceptance criteria of the pipeline, each run at its stated tolerance.

Every test prints one ``[PASS]``/``[FAIL]`` line (repeated in the terminal
summary) before asserting.  The smoke-training criteria train two models from
scratch on a single thread and take several minutes.
"""
import math
import time

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from rfnet.checkpoint import encode_checkpoint, load_checkpoint, save_checkpoint
from rfnet.data import ImageDecodeError, decode_pnm, make_texture, standardize
from rfnet.descriptor import descriptor_distance, distance_matrix
from rfnet.detector import DetectorConfig, RFDetector, estimate_scale
from rfnet.engine import Tensor, no_grad, windowed_softmax
from rfnet.evaluation import evaluate, match_nn, match_nnr, match_nnt
from rfnet.experiments import PairSet, description_curve, loss_drop, run_smoke, smoke_config, smoke_corpus
from rfnet.geometry import parse_homography
from rfnet.gradient_suite import run_gradient_suite
from rfnet.losses import description_loss

from oracles import (
    description_loss_loop,
    distance_matrix_loop,
    impulse_footprint,
    nn_loop,
    nnr_loop,
    nnt_loop,
    windowed_softmax_loop,
)
from verdicts import record_verdict

SEEDS = range(200)
SMOKE_ITERATIONS = 500
SMOKE_BUDGET_S = 15 * 60
HELD_OUT_K = 128


def unit_rows(rng, k, d=16):
    v = rng.standard_normal((k, d))
    return v / np.linalg.norm(v, axis=1, keepdims=True)


def pairs_of(matches):
    return [(m.index_a, m.index_b) for m in matches]


# -- smoke runs (shared) -----------------------------------------------------------------------
class SmokeRun:
    def __init__(self, seed=0):
        self.config = smoke_config(seed=seed, iterations=SMOKE_ITERATIONS)
        self.corpus = smoke_corpus(seed)
        start = time.perf_counter()
        with threadpool_limits(1):
            self.untrained, self.state, self.history = run_smoke(self.config, self.corpus)
        self.seconds = time.perf_counter() - start
        self.checkpoint = encode_checkpoint(self.state)

    def held_out_nnr(self, model):
        with threadpool_limits(1):
            report = evaluate(model, self.corpus.held_out_sequences(), ("nnr",), (HELD_OUT_K,), threads=1)
        assert not report.failures, report.failures
        return report.mean_score("nnr", HELD_OUT_K)


@pytest.fixture(scope="module")
def smoke_run():
    return SmokeRun(seed=0)


# -- criteria ------------------------------------------------------------------------------------
def test_gradient_suite():
    start = time.perf_counter()
    results = run_gradient_suite()
    elapsed = time.perf_counter() - start
    failed = [r for r in results if not r.passed]
    worst_p = max(r.error for r in results if r.kind == "primitive")
    worst_c = max(r.error for r in results if r.kind == "composed")
    ok = not failed and elapsed < 120
    detail = (
        f"{len(results)} cases, worst primitive {worst_p:.1e} (<1e-4), worst composed {worst_c:.1e} (<1e-3), "
        f"{elapsed:.1f}s (<120s)" + (f"; failing: {', '.join(r.name for r in failed)}" if failed else "")
    )
    record_verdict("gradient suite", ok, detail)
    assert ok, detail


def test_fusion_invariants():
    violations = 0
    worst_sum = 0.0
    for run in range(100):
        rng = np.random.default_rng([1, run])
        if run % 10 == 0:
            detector = RFDetector(DetectorConfig(n_layers=10), rng)
        img = rng.standard_normal((32, 32)).astype(np.float32) * rng.uniform(0.5, 3)
        with no_grad():
            out = detector(img)
        prob = out.prob.data.astype(np.float64)
        h_hat = out.h_hat.data.astype(np.float64)
        score = out.score.data.astype(np.float64)
        scale = estimate_scale(out.prob).data
        dev = np.abs(prob.sum(axis=0) - 1.0)
        worst_sum = max(worst_sum, float(dev.max()))
        violations += int((dev > 1e-6).sum())
        violations += int((score < h_hat.min(axis=0)).sum() + (score > h_hat.max(axis=0)).sum())
        violations += int(((scale < 3) | (scale > 21)).sum())
    ok = violations == 0
    detail = f"100 forwards at 32x32, N=10: {violations} violations, max |sum Pr - 1| = {worst_sum:.1e}"
    record_verdict("fusion invariants", ok, detail)
    assert ok, detail


def test_receptive_field_oracle():
    detector = RFDetector(DetectorConfig(n_layers=3, channels=4), np.random.default_rng(11))
    counts = {n: int(impulse_footprint(detector, n).sum()) for n in (1, 2, 3)}
    ok = all(counts[n] == (2 * n + 1) ** 2 for n in counts)
    detail = ", ".join(f"n={n}: {c} px (expect {(2 * n + 1) ** 2})" for n, c in counts.items())
    record_verdict("receptive-field oracle", ok, detail)
    assert ok, detail


def test_oracle_equivalence():
    worst = {"windowed_softmax": 0.0, "distance_matrix": 0.0, "description_loss": 0.0}
    matcher_mismatches = 0
    for seed in SEEDS:
        rng = np.random.default_rng([2, seed])
        h = rng.standard_normal((int(rng.integers(1, 4)), int(rng.integers(3, 10)), int(rng.integers(3, 10)))) * 2
        window = int(rng.choice([1, 3, 5, 15]))
        got = windowed_softmax(Tensor(h), window).data
        worst["windowed_softmax"] = max(worst["windowed_softmax"], float(np.abs(got - windowed_softmax_loop(h, window)).max()))

        ka, kb = int(rng.integers(1, 17)), int(rng.integers(2, 17))
        da, db = unit_rows(rng, ka), unit_rows(rng, kb)
        dm = distance_matrix(Tensor(da), Tensor(db)).data
        worst["distance_matrix"] = max(worst["distance_matrix"], float(np.abs(dm - distance_matrix_loop(da, db)).max()))
        matcher_mismatches += pairs_of(match_nn(da, db)) != [(i, j) for i, j, _, _ in nn_loop(da, db)]
        matcher_mismatches += pairs_of(match_nnt(da, db, 1.0)) != nnt_loop(da, db, 1.0)
        matcher_mismatches += pairs_of(match_nnr(da, db, 0.7)) != nnr_loop(da, db, 0.7)

        k = int(rng.integers(2, 17))
        di, dj = unit_rows(rng, k), unit_rows(rng, k)
        extent = 12.0 if seed % 2 else 400.0
        ci, cj = rng.uniform(0, extent, (k, 2)), rng.uniform(0, extent, (k, 2))
        for radius in (5.0, 0.0):
            got = float(description_loss(Tensor(di), Tensor(dj), ci, cj, radius=radius).data)
            err = abs(got - description_loss_loop(di, dj, ci, cj, radius))
            worst["description_loss"] = max(worst["description_loss"], err)
    ok = matcher_mismatches == 0 and all(v < 1e-6 for v in worst.values())
    detail = (
        f"{len(SEEDS)} seeds, K<=16: "
        + ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        + f", matcher mismatches {matcher_mismatches}"
    )
    record_verdict("oracle equivalence", ok, detail)
    assert ok, detail


def test_metric_identities():
    worst = 0.0
    out_of_range = containment = 0
    for seed in SEEDS:
        rng = np.random.default_rng([3, seed])
        a, b = unit_rows(rng, 2, int(rng.integers(2, 129)))
        d = descriptor_distance(a, b)
        worst = max(worst, abs(d - float(np.linalg.norm(a - b))))
        out_of_range += not 0.0 <= d <= 2.0
        da, db = unit_rows(rng, int(rng.integers(1, 17))), unit_rows(rng, int(rng.integers(2, 17)))
        nn = set(pairs_of(match_nn(da, db)))
        nnt_inf = set(pairs_of(match_nnt(da, db, math.inf)))
        nnr = set(pairs_of(match_nnr(da, db, 0.7)))
        containment += not (nnr <= nnt_inf <= nn)
        containment += not set(pairs_of(match_nnt(da, db, 1.0))) <= nn
    ok = worst < 1e-6 and out_of_range == 0 and containment == 0
    detail = f"max |d - L2| = {worst:.1e}, out of [0,2]: {out_of_range}, containment violations: {containment}"
    record_verdict("metric identities", ok, detail)
    assert ok, detail


def test_neighbor_mask_behaviour():
    # anchor 0's hardest negative is counterpart 1, whose centroid lies 3 px from
    # counterpart 0; every other candidate is orthogonal to anchor 0
    e = np.eye(4)
    di = e[:3]
    dj = np.array([0.6 * e[0] + 0.8 * e[3], 0.8 * e[0] + 0.6 * e[1], e[2]])
    ci = np.array([[0.0, 0.0], [40.0, 0.0], [80.0, 0.0]])
    cj = np.array([[0.0, 0.0], [3.0, 0.0], [80.0, 0.0]])
    masked = float(description_loss(Tensor(di), Tensor(dj), ci, cj, radius=5.0).data)
    unmasked = float(description_loss(Tensor(di), Tensor(dj), ci, cj, radius=0.0).data)
    oracle_masked = description_loss_loop(di, dj, ci, cj, 5.0)
    oracle_unmasked = description_loss_loop(di, dj, ci, cj, 0.0)
    ok = (
        abs(masked - oracle_masked) < 1e-6
        and abs(unmasked - oracle_unmasked) < 1e-6
        and abs((unmasked - masked) - (oracle_unmasked - oracle_masked)) < 1e-6
        and abs(unmasked - masked) > 1e-3
    )
    detail = f"masked {masked:.6f} (oracle {oracle_masked:.6f}), unmasked {unmasked:.6f} (oracle {oracle_unmasked:.6f})"
    record_verdict("neighbor-mask behaviour", ok, detail)
    assert ok, detail


def test_identity_pair_sanity(smoke_run):
    img = standardize(make_texture(np.random.default_rng(5), (64, 64)))
    seqs = [PairSet("identity", [(img, img, np.eye(3))])]
    results = []
    for name, model in (("untrained", smoke_run.untrained), ("trained", smoke_run.state)):
        report = evaluate(model, seqs, ("nn",), (HELD_OUT_K,), px_thresh=5.0)
        results.append((name, report.mean_score("nn"), report.mean_repeatability()))
    ok = all(score == 1.0 and rep == 1.0 for _, score, rep in results)
    detail = "; ".join(f"{n}: NN score {s}, repeatability {r}" for n, s, r in results)
    record_verdict("identity-pair sanity", ok, detail)
    assert ok, detail


def test_smoke_training_description_loss_drop(smoke_run):
    drop = loss_drop(description_curve(smoke_run.history))
    curve = description_curve(smoke_run.history)
    ok = drop >= 0.20 and smoke_run.seconds <= SMOKE_BUDGET_S
    detail = (
        f"{SMOKE_ITERATIONS} iterations in {smoke_run.seconds:.0f}s (<= {SMOKE_BUDGET_S}s); first-20 mean "
        f"{np.nanmean(curve[:20]):.4f}, last-20 mean {np.nanmean(curve[-20:]):.4f}, drop {drop:.1%} (>= 20%)"
    )
    record_verdict("smoke training (a) description loss", ok, detail)
    assert ok, detail


def test_smoke_training_beats_untrained(smoke_run):
    before = smoke_run.held_out_nnr(smoke_run.untrained)
    after = smoke_run.held_out_nnr(smoke_run.state)
    ok = after is not None and before is not None and after > before
    detail = f"NNR(0.7) match score at K={HELD_OUT_K} on 5 held-out pairs: untrained {before}, trained {after}"
    record_verdict("smoke training (b) held-out matching", ok, detail)
    assert ok, detail


def test_determinism(smoke_run):
    second = SmokeRun(seed=0)
    same = second.checkpoint == smoke_run.checkpoint
    detail = f"two {SMOKE_ITERATIONS}-iteration runs, checkpoints of {len(smoke_run.checkpoint)} bytes " + (
        "bit-identical" if same else "differ"
    )
    record_verdict("determinism", same, detail)
    assert same, detail


def test_format_round_trips(smoke_run, tmp_path):
    path = tmp_path / "smoke.rfnw"
    save_checkpoint(smoke_run.state, path)
    checkpoint_ok = encode_checkpoint(load_checkpoint(path)) == path.read_bytes() == smoke_run.checkpoint

    rejected = 0
    bad_homographies = ["1 0 0 0 1 0 0 0", "1 0 0 0 1 0 0 0 1 0", "1 0 0 0 1 0 0 0 x", "0 0 0 0 0 0 0 0 0", ""]
    for text in bad_homographies:
        try:
            parse_homography(text)
        except ValueError:
            rejected += 1
    bad_images = [
        b"P3\n1 1\n255\n0",
        b"P5\n2 2\n255\n" + bytes(3),
        b"P6\n2 2\n255\n" + bytes(11),
        b"P5\n2",
        b"P5\n0 2\n255\n",
        b"P5\n2 2\n70000\n" + bytes(8),
        b"P5\n2 x\n255\n" + bytes(4),
    ]
    for payload in bad_images:
        try:
            decode_pnm(payload)
        except ImageDecodeError:
            rejected += 1
    total = len(bad_homographies) + len(bad_images)
    good = decode_pnm(b"P5\n2 1\n255\n" + bytes([0, 255])).tolist() == [[0.0, 1.0]]
    ok = checkpoint_ok and rejected == total and good
    detail = f"checkpoint save/load byte-identical: {checkpoint_ok}; malformed inputs rejected {rejected}/{total}"
    record_verdict("format round-trips", ok, detail)
    assert ok, detail
