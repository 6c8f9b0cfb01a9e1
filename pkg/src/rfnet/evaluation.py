"""Matching strategies, match score, repeatability and report files."""
from __future__ import annotations

import concurrent.futures
import csv
import io
import json
import logging
import os
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .checkpoint import atomic_write, load_checkpoint
from .descriptor import RFDescriptor
from .detector import RFDetector, keypoint_array, select_keypoints
from .engine import no_grad
from .geometry import crop_patches, warp_points

log = logging.getLogger(__name__)

PX_THRESH = 5.0
NNT_THRESHOLD = 1.0
NNR_THRESHOLD = 0.7
STRATEGIES = ("nn", "nnt", "nnr")
SCORE_DENOMINATOR = "min(|kps_a|, |kps_b|)"


@dataclass
class Match:
    index_a: int
    index_b: int
    distance: float
    correct: bool = False


def pairwise_distances(da, db) -> np.ndarray:
    """sqrt(max(0, 2 - 2 a.b)) for every row pair, in float64."""
    da = np.asarray(getattr(da, "descriptors", da), dtype=np.float64)
    db = np.asarray(getattr(db, "descriptors", db), dtype=np.float64)
    if da.ndim != 2 or db.ndim != 2 or (da.size and db.size and da.shape[1] != db.shape[1]):
        raise ValueError(f"descriptor sets must be N x D with equal D, got {da.shape} and {db.shape}")
    return np.sqrt(np.maximum(0.0, 2.0 - 2.0 * (da @ db.T)))


def nearest_from_distances(dist: np.ndarray) -> list[Match]:
    """Row-wise argmin of a distance matrix (ties -> lower column index)."""
    dist = np.asarray(dist, dtype=np.float64)
    if dist.shape[0] == 0 or dist.shape[1] == 0:
        return []
    best = dist.argmin(axis=1)
    return [Match(a, int(b), float(dist[a, b])) for a, b in enumerate(best)]


def match_nn(da, db) -> list[Match]:
    """Each row of ``da`` matched to its nearest row of ``db`` (ties -> lower index)."""
    return nearest_from_distances(pairwise_distances(da, db))


def match_nnt(da, db, t: float = NNT_THRESHOLD) -> list[Match]:
    """Nearest-neighbor matches with distance strictly below ``t``."""
    return [m for m in match_nn(da, db) if m.distance < t]


def match_nnr(da, db, t: float = NNR_THRESHOLD) -> list[Match]:
    """Nearest-neighbor matches whose first/second distance ratio is below ``t``.

    A zero second distance gives ratio 1 (rejected), or 0 if the first is zero too.
    """
    dist = pairwise_distances(da, db)
    if dist.shape[1] < 2:
        raise ValueError(f"ratio matching needs at least 2 target descriptors, got {dist.shape[1]}")
    if dist.shape[0] == 0:
        return []
    best = dist.argmin(axis=1)
    two = np.partition(dist, 1, axis=1)[:, :2]
    out = []
    for a, b in enumerate(best):
        first, second = two[a]
        if second > 0:
            ratio = first / second
        else:
            ratio = 0.0 if first == 0 else 1.0
        if ratio < t:
            out.append(Match(a, int(b), float(dist[a, b])))
    return out


MATCHERS = {"nn": match_nn, "nnt": match_nnt, "nnr": match_nnr}


def run_matcher(strategy: str, da, db, t: Optional[float] = None) -> list[Match]:
    """Dispatch by name; ``t`` overrides the NNT/NNR threshold."""
    if strategy not in MATCHERS:
        raise ValueError(f"unknown strategy {strategy!r}; valid: {', '.join(STRATEGIES)}")
    if t is None or strategy == "nn":
        return MATCHERS[strategy](da, db)
    return MATCHERS[strategy](da, db, t)


# -- geometric scoring -------------------------------------------------------------------
def _points(kps) -> np.ndarray:
    if isinstance(kps, list) and kps and hasattr(kps[0], "x"):
        return keypoint_array(kps)
    return np.asarray(kps, dtype=np.float64).reshape(-1, 2)


def mark_correct(matches: Sequence[Match], kps_a, kps_b, h_ab, px_thresh: float = PX_THRESH) -> list[Match]:
    """Copies of ``matches`` with ``correct`` set by the reprojection test."""
    pa, pb = _points(kps_a), _points(kps_b)
    if not matches:
        return []
    ia = np.array([m.index_a for m in matches])
    ib = np.array([m.index_b for m in matches])
    warped, valid = warp_points(h_ab, pa[ia])
    err = np.linalg.norm(np.where(valid[:, None], warped, np.inf) - pb[ib], axis=1)
    ok = valid & (err < px_thresh)
    return [Match(m.index_a, m.index_b, m.distance, bool(c)) for m, c in zip(matches, ok)]


def score_matches(matches, kps_a, kps_b, h_ab, px_thresh: float = PX_THRESH) -> tuple[Optional[float], int]:
    """(match score, match quantity).  The score is None when either keypoint set is empty."""
    n_correct = sum(m.correct for m in mark_correct(matches, kps_a, kps_b, h_ab, px_thresh))
    denom = min(len(_points(kps_a)), len(_points(kps_b)))
    return (n_correct / denom if denom else None), int(n_correct)


def repeatability(kps_a, kps_b, h_ab, px_thresh: float = PX_THRESH, shape_b=None) -> Optional[float]:
    """Fraction of keypoints re-detected after warping a into b.

    Points of a that warp outside image b (when ``shape_b`` = (H, W) is given)
    are ignored.  Pairs are assigned greedily by increasing distance, one to
    one.  Returns None when a denominator is empty.
    """
    pa, pb = _points(kps_a), _points(kps_b)
    warped, valid = warp_points(h_ab, pa)
    if shape_b is not None:
        hb, wb = shape_b
        with np.errstate(invalid="ignore"):
            valid &= (warped[:, 0] >= 0) & (warped[:, 0] <= wb - 1) & (warped[:, 1] >= 0) & (warped[:, 1] <= hb - 1)
    warped = warped[valid]
    denom = min(len(warped), len(pb))
    if denom == 0:
        return None
    dist = np.linalg.norm(warped[:, None, :] - pb[None, :, :], axis=2)
    cand = np.argwhere(dist < px_thresh)
    order = np.argsort(dist[cand[:, 0], cand[:, 1]], kind="stable")
    used_a, used_b = set(), set()
    for i, j in cand[order]:
        if i not in used_a and j not in used_b:
            used_a.add(i)
            used_b.add(j)
    return len(used_a) / denom


# -- end-to-end evaluation ----------------------------------------------------------------
@dataclass
class Features:
    keypoints: np.ndarray  # K x 2 (x, y)
    descriptors: np.ndarray  # K x D


def detect_and_describe(
    detector: RFDetector,
    descriptor: RFDescriptor,
    image,
    k: int,
    crop_factor: float = 1.0,
    nms_radius: int = 0,
    border: int = 8,
) -> Features:
    """Top-k keypoints of one image and their descriptors (no gradients)."""
    img = np.asarray(getattr(image, "pixels", image), dtype=np.float32)
    with no_grad():
        out = detector(img)
        kps = select_keypoints(out, k, nms_radius, border)
        if not kps:
            return Features(np.zeros((0, 2)), np.zeros((0, descriptor.config.dim), dtype=np.float32))
        patches = crop_patches(
            img[None],
            keypoint_array(kps),
            np.array([kp.orientation for kp in kps], dtype=np.float32),
            np.array([kp.scale for kp in kps], dtype=np.float32),
            descriptor.config.patch_size,
            crop_factor,
        )
    desc = descriptor.describe(patches).descriptors
    return Features(keypoint_array(kps), desc)


@dataclass
class MatchReport:
    records: list = field(default_factory=list)
    repeatability: list = field(default_factory=list)
    failures: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def mean_score(self, strategy: str, k: Optional[int] = None, sequence: Optional[str] = None) -> Optional[float]:
        vals = [
            r["match_score"]
            for r in self.records
            if r["strategy"] == strategy
            and (k is None or r["k"] == k)
            and (sequence is None or r["sequence"] == sequence)
            and r["match_score"] is not None
        ]
        return float(np.mean(vals)) if vals else None

    def mean_repeatability(self, k: Optional[int] = None) -> Optional[float]:
        vals = [r["repeatability"] for r in self.repeatability if (k is None or r["k"] == k) and r["repeatability"] is not None]
        return float(np.mean(vals)) if vals else None

    def aggregates(self) -> list[dict]:
        """Unweighted means per (sequence, k, strategy) and overall per (k, strategy)."""
        rows = []
        keys = sorted({(r["sequence"], r["k"], r["strategy"]) for r in self.records})
        for seq, k, strat in keys:
            rows.append({"sequence": seq, "k": k, "strategy": strat, "mean_match_score": self.mean_score(strat, k, seq)})
        for k, strat in sorted({(r["k"], r["strategy"]) for r in self.records}):
            rows.append({"sequence": "*", "k": k, "strategy": strat, "mean_match_score": self.mean_score(strat, k)})
        return rows


def _resolve_model(model):
    if isinstance(model, (str, os.PathLike)):
        model = load_checkpoint(model)
    if hasattr(model, "detector"):
        return model.detector, model.descriptor, getattr(model.config.train, "crop_factor", 1.0)
    detector, descriptor = model
    return detector, descriptor, 1.0


def match_threads(default: int = 1) -> int:
    raw = os.environ.get("RF_MATCH_THREADS", "")
    try:
        return max(1, int(raw)) if raw else default
    except ValueError:
        log.warning("ignoring non-integer RF_MATCH_THREADS=%r", raw)
        return default


def _evaluate_pair(detector, descriptor, crop_factor, seq_name, index, pair, protocols, k_list, px_thresh):
    ref, tgt, h = pair
    kmax = max(k_list)
    fa = detect_and_describe(detector, descriptor, ref, kmax, crop_factor)
    fb = detect_and_describe(detector, descriptor, tgt, kmax, crop_factor)
    shape_b = np.shape(getattr(tgt, "pixels", tgt))
    records, reps = [], []
    for k in k_list:
        pa, pb = fa.keypoints[:k], fb.keypoints[:k]
        da, db = fa.descriptors[:k], fb.descriptors[:k]
        for strat in protocols:
            matches = mark_correct(run_matcher(strat, da, db), pa, pb, h, px_thresh)
            score, quantity = score_matches(matches, pa, pb, h, px_thresh)
            records.append(
                {
                    "sequence": seq_name,
                    "pair": index,
                    "k": k,
                    "strategy": strat,
                    "n_matches": len(matches),
                    "n_correct": quantity,
                    "match_score": score,
                    "match_quantity": quantity,
                }
            )
        reps.append(
            {"sequence": seq_name, "pair": index, "k": k, "repeatability": repeatability(pa, pb, h, px_thresh, shape_b)}
        )
    return records, reps


def evaluate(
    model,
    sequences,
    protocols: Sequence[str] = STRATEGIES,
    k_list: Sequence[int] = (512,),
    px_thresh: float = PX_THRESH,
    threads: Optional[int] = None,
) -> MatchReport:
    """Match score per (pair, K, protocol) and repeatability per (pair, K).

    ``model`` is a checkpoint path, a TrainState or a (detector, descriptor)
    tuple; ``sequences`` are objects with ``name`` and ``pairs()``.  A failing
    pair is recorded under ``failures`` and skipped.
    """
    for strat in protocols:
        if strat not in MATCHERS:
            raise ValueError(f"unknown strategy {strat!r}; valid: {', '.join(STRATEGIES)}")
    k_list = sorted({int(k) for k in k_list})
    if not k_list or k_list[0] < 1:
        raise ValueError("K list must contain positive integers")
    detector, descriptor, crop_factor = _resolve_model(model)
    jobs = []
    for seq in sequences:
        for index, pair in enumerate(seq.pairs(), start=1):
            jobs.append((seq.name, index, pair))

    def run(job):
        name, index, pair = job
        try:
            return _evaluate_pair(detector, descriptor, crop_factor, name, index, pair, protocols, k_list, px_thresh)
        except Exception as exc:  # noqa: BLE001 - a bad pair must not abort the run
            log.warning("pair %s/%d failed: %s", name, index, exc)
            return {"sequence": name, "pair": index, "error": f"{type(exc).__name__}: {exc}"}

    threads = threads or match_threads()
    if threads > 1:
        with concurrent.futures.ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(run, jobs))
    else:
        results = [run(j) for j in jobs]

    report = MatchReport(
        metadata={
            "px_thresh": px_thresh,
            "nnt_threshold": NNT_THRESHOLD,
            "nnr_threshold": NNR_THRESHOLD,
            "score_denominator": SCORE_DENOMINATOR,
            "protocols": list(protocols),
            "k_list": k_list,
            "pairs": len(jobs),
        }
    )
    for res in results:
        if isinstance(res, dict):
            report.failures.append(res)
        else:
            report.records.extend(res[0])
            report.repeatability.extend(res[1])
    return report


# -- report files --------------------------------------------------------------------------
def report_json(report: MatchReport) -> str:
    nested: dict = {}
    for r in report.records:
        pair = nested.setdefault(r["sequence"], {}).setdefault(str(r["pair"]), {})
        pair.setdefault(f"k={r['k']}", {})[r["strategy"]] = {
            k: r[k] for k in ("n_matches", "n_correct", "match_score", "match_quantity")
        }
    for r in report.repeatability:
        pair = nested.setdefault(r["sequence"], {}).setdefault(str(r["pair"]), {})
        pair.setdefault(f"k={r['k']}", {})["repeatability"] = r["repeatability"]
    doc = {
        "metadata": report.metadata,
        "sequences": nested,
        "aggregates": report.aggregates(),
        "repeatability_by_k": {str(k): report.mean_repeatability(k) for k in report.metadata.get("k_list", [])},
        "failures": report.failures,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    for row in rows:
        writer.writerow(["" if v is None else v for v in row])
    return buf.getvalue()


RECORD_HEADER = ("sequence", "pair", "k", "strategy", "n_matches", "n_correct", "match_score", "match_quantity")


def report_csv(report: MatchReport) -> str:
    return _csv_text(RECORD_HEADER, ([r[h] for h in RECORD_HEADER] for r in report.records))


def plot_data_csv(report: MatchReport) -> str:
    """Mean match score per strategy against K, plus mean repeatability."""
    rows = []
    for k in report.metadata.get("k_list", []):
        for strat in report.metadata.get("protocols", []):
            rows.append(("k", k, strat, report.mean_score(strat, k)))
        rows.append(("k", k, "repeatability", report.mean_repeatability(k)))
    return _csv_text(("axis", "value", "series", "mean"), rows)


def write_report(report: MatchReport, out_dir) -> dict:
    """Writes report.json, report.csv and plot_k.csv atomically; returns their paths."""
    out_dir = os.fspath(out_dir)
    paths = {
        "json": os.path.join(out_dir, "report.json"),
        "csv": os.path.join(out_dir, "report.csv"),
        "plot": os.path.join(out_dir, "plot_k.csv"),
    }
    atomic_write(paths["json"], report_json(report).encode("utf-8"))
    atomic_write(paths["csv"], report_csv(report).encode("utf-8"))
    atomic_write(paths["plot"], plot_data_csv(report).encode("utf-8"))
    return paths


def records_as_dicts(matches: Sequence[Match]) -> list[dict]:
    return [asdict(m) for m in matches]
