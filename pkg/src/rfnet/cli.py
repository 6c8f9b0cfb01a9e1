"""Command-line front end: ``rfnet {train,detect,match,eval,synth}``.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""
from __future__ import annotations

import argparse
import csv
import io
import logging
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError, atomic_write, load_checkpoint, save_checkpoint
from .config import ConfigError, RunConfig
from .data import (
    SequenceError,
    SynthParams,
    decode_image,
    list_sequences,
    load_sequence,
    make_texture,
    preprocess,
    resize_bilinear,
    split_sequences,
    synth_sequence,
    to_gray,
    to_unit_range,
    write_sequence,
)
from .detector import select_keypoints
from .evaluation import STRATEGIES, detect_and_describe, evaluate, mark_correct, run_matcher, write_report
from .engine import no_grad
from .geometry import parse_homography
from .training import LOSS_KEYS, TrainState, mean_losses, train

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2


class UsageError(Exception):
    """Bad arguments or configuration: exit code 2."""


# -- helpers -----------------------------------------------------------------------------
def _size(text: Optional[str]):
    if not text:
        return None
    try:
        w, h = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise UsageError(f"--size must look like WIDTHxHEIGHT, got {text!r}") from None
    if w < 3 or h < 3:
        raise UsageError(f"--size must be at least 3x3, got {text!r}")
    return w, h


def _k_list(text: str) -> list[int]:
    try:
        ks = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"--k expects comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError(f"--k values must be positive, got {text!r}")
    return ks


def _strategies(text: str) -> list[str]:
    names = [v.strip().lower() for v in text.split(",") if v.strip()]
    bad = [n for n in names if n not in STRATEGIES]
    if bad or not names:
        raise UsageError(f"unknown strategy {bad[0] if bad else text!r}; valid names: {', '.join(STRATEGIES)}")
    return names


def _resolve(out_dir: Path, name: str) -> Path:
    p = Path(name)
    return p if p.is_absolute() else out_dir / p


def _load_image(path: str, size):
    try:
        return preprocess(decode_image(path), size)
    except OSError as exc:
        raise RuntimeError(f"{path}: {exc.strerror}") from None


def _csv(header, rows) -> bytes:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue().encode("utf-8")


def _fmt(v: float) -> str:
    return f"{float(v):.6g}"


# -- train -------------------------------------------------------------------------------
def training_pairs(config: RunConfig) -> list:
    data = config.data
    if not data.dataset:
        raise UsageError("config key data.dataset is required for training")
    root = Path(data.dataset)
    if not root.is_dir():
        raise UsageError(f"dataset path {root} does not exist")
    dirs = list_sequences(root)
    if data.split != "all":
        if data.split not in ("train", "test"):
            raise UsageError(f"data.split must be train, test or all, got {data.split!r}")
        split = split_sequences([d.name for d in dirs], data.train_ratio, data.split_seed)
        dirs = [d for d in dirs if split[d.name] == data.split]
    pairs = []
    for d in dirs:
        seq = load_sequence(d, (data.width, data.height))
        pairs.extend((ref.pixels, tgt.pixels, h) for ref, tgt, h in seq.pairs())
    if not pairs:
        raise RuntimeError(f"no training pairs found under {root} (split {data.split!r})")
    return pairs


def cmd_train(args) -> int:
    config = RunConfig.load(args.config)
    out_dir = Path(args.output)
    pairs = training_pairs(config)
    state = load_checkpoint(args.resume, config) if args.resume else TrainState.create(config)
    ckpt_path = _resolve(out_dir, config.train.checkpoint_path)
    log_path = _resolve(out_dir, config.train.loss_log)
    remaining = config.train.iterations - state.iteration
    log_path.parent.mkdir(parents=True, exist_ok=True)
    new_log = not log_path.exists() or not args.resume
    with open(log_path, "w" if new_log else "a", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new_log:
            writer.writerow(("iteration",) + LOSS_KEYS + ("skipped",))

        def on_iteration(st, record):
            losses = mean_losses(record)
            skipped = sum(d.losses is None for d in record.directions)
            writer.writerow([record.iteration] + [_fmt(losses[k]) for k in LOSS_KEYS] + [skipped])
            fh.flush()
            interval = config.train.checkpoint_interval
            if interval and record.iteration % interval == 0:
                save_checkpoint(st, ckpt_path)

        if remaining > 0:
            train(state, pairs, remaining, on_iteration)
    save_checkpoint(state, ckpt_path)
    print(f"trained to iteration {state.iteration}; checkpoint {ckpt_path}; loss log {log_path}")
    return EXIT_OK


# -- detect / match -----------------------------------------------------------------------
def cmd_detect(args) -> int:
    state = load_checkpoint(args.checkpoint)
    img = _load_image(args.image, _size(args.size))
    with no_grad():
        kps = select_keypoints(state.detector(img.pixels), args.k, args.nms_radius, args.border)
    rows = [(_fmt(kp.x), _fmt(kp.y), _fmt(kp.score), _fmt(kp.orientation), _fmt(kp.scale)) for kp in kps]
    atomic_write(args.output, _csv(("x", "y", "score", "orientation", "scale"), rows))
    print(f"{len(rows)} keypoints -> {args.output}")
    return EXIT_OK


def cmd_match(args) -> int:
    strategy = _strategies(args.strategy)
    if len(strategy) != 1:
        raise UsageError("match takes a single --strategy")
    strategy = strategy[0]
    state = load_checkpoint(args.checkpoint)
    size = _size(args.size)
    img_a, img_b = _load_image(args.image_a, size), _load_image(args.image_b, size)
    crop = state.config.train.crop_factor
    fa = detect_and_describe(state.detector, state.descriptor, img_a, args.k, crop)
    fb = detect_and_describe(state.detector, state.descriptor, img_b, args.k, crop)
    matches = run_matcher(strategy, fa.descriptors, fb.descriptors, args.threshold)
    pa, pb = fa.keypoints, fb.keypoints
    rows = [(_fmt(pa[m.index_a, 0]), _fmt(pa[m.index_a, 1]), _fmt(pb[m.index_b, 0]), _fmt(pb[m.index_b, 1]),
             _fmt(m.distance)) for m in matches]
    atomic_write(args.output, _csv(("xa", "ya", "xb", "yb", "distance"), rows))
    if args.homography:
        h = parse_homography(Path(args.homography).read_text(), args.homography)
        marked = mark_correct(matches, pa, pb, h)
        overlay = [(r[0], r[1], r[2], r[3], int(m.correct)) for r, m in zip(rows, marked)]
        overlay_path = args.overlay or str(Path(args.output).with_suffix(".overlay.csv"))
        atomic_write(overlay_path, _csv(("xa", "ya", "xb", "yb", "correct"), overlay))
        print(f"{sum(m.correct for m in marked)}/{len(marked)} matches correct; overlay -> {overlay_path}")
    print(f"{len(rows)} matches -> {args.output}")
    return EXIT_OK


# -- eval ----------------------------------------------------------------------------------
def cmd_eval(args) -> int:
    protocols = _strategies(args.protocols)
    ks = _k_list(args.k)
    root = Path(args.dataset)
    if not root.is_dir():
        raise UsageError(f"dataset path {root} does not exist")
    state = load_checkpoint(args.checkpoint)
    size = _size(args.size) or (state.config.data.width, state.config.data.height)
    dirs = list_sequences(root)
    if not dirs:
        raise RuntimeError(f"dataset {root} contains no sequence directories")
    sequences = [load_sequence(d, size) for d in dirs]
    report = evaluate(state, sequences, protocols, ks)
    paths = write_report(report, args.output)
    for k in ks:
        scores = ", ".join(f"{p}={report.mean_score(p, k):.4f}" for p in protocols if report.mean_score(p, k) is not None)
        print(f"K={k}: {scores}")
    if report.failures:
        print(f"{len(report.failures)} pair(s) failed; see {paths['json']}", file=sys.stderr)
    print(f"reports -> {args.output}")
    return EXIT_OK


# -- synth ----------------------------------------------------------------------------------
def cmd_synth(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    size = _size(args.size) or (96, 96)
    rng = np.random.default_rng(args.seed)
    if args.bases:
        base_dir = Path(args.bases)
        if not base_dir.is_dir():
            raise UsageError(f"base image directory {base_dir} does not exist")
        files = sorted(p for p in base_dir.iterdir() if p.suffix.lower() in (".pgm", ".ppm", ".png", ".jpg", ".jpeg"))
        if not files:
            raise RuntimeError(f"no base images in {base_dir}")
        bases = [to_unit_range(resize_bilinear(to_gray(decode_image(p)), size)) for p in files]
    else:
        bases = [make_texture(rng, (size[1], size[0])) for _ in range(args.n_bases)]
    params = SynthParams(
        max_rotation=args.max_rotation,
        max_scale=args.max_scale,
        max_translation=args.max_translation,
        max_perspective=args.max_perspective,
    )
    out = Path(args.output)
    for i in range(args.count):
        images, homs = synth_sequence(bases[i % len(bases)], rng, params, targets=5)
        write_sequence(out / f"v_synth_{i:03d}", images, homs)
    print(f"{args.count} sequences -> {out}")
    return EXIT_OK


# -- entry point -----------------------------------------------------------------------------
def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rfnet", description="Receptive-field keypoint detection and description.")
    parser.add_argument("--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train detector and descriptor from a config file")
    p.add_argument("--config", required=True)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.add_argument("--output", required=True, help="directory for checkpoint and loss log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="write the top-K keypoints of an image as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--k", type=int, default=512)
    p.add_argument("--output", required=True)
    p.add_argument("--size", help="resize to WIDTHxHEIGHT before detection")
    p.add_argument("--nms-radius", type=int, default=0)
    p.add_argument("--border", type=int, default=8)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("match", help="match two images and write the matches as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image-a", required=True)
    p.add_argument("--image-b", required=True)
    p.add_argument("--strategy", default="nnr", help=f"one of {', '.join(STRATEGIES)}")
    p.add_argument("--threshold", type=float, help="override the NNT distance / NNR ratio threshold")
    p.add_argument("--k", type=int, default=1024)
    p.add_argument("--output", required=True)
    p.add_argument("--homography", help="H_a->b file; enables the overlay output")
    p.add_argument("--overlay", help="overlay CSV path (default: <output>.overlay.csv)")
    p.add_argument("--size", help="resize to WIDTHxHEIGHT before matching")
    p.set_defaults(func=cmd_match)

    p = sub.add_parser("eval", help="match score and repeatability over a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--protocols", default=",".join(STRATEGIES))
    p.add_argument("--k", default="512,1024,2048", help="comma-separated keypoint counts")
    p.add_argument("--output", required=True, help="report directory")
    p.add_argument("--size", help="WIDTHxHEIGHT (default: the checkpoint's data size)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate synthetic sequences in the HPatches layout")
    p.add_argument("--output", required=True)
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--bases", help="directory of base images (default: random textures)")
    p.add_argument("--n-bases", type=int, default=3)
    p.add_argument("--size", help="WIDTHxHEIGHT of the generated images (default 96x96)")
    defaults = SynthParams()
    p.add_argument("--max-rotation", type=float, default=defaults.max_rotation)
    p.add_argument("--max-scale", type=float, default=defaults.max_scale)
    p.add_argument("--max-translation", type=float, default=defaults.max_translation)
    p.add_argument("--max-perspective", type=float, default=defaults.max_perspective)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"rfnet {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (RuntimeError, ValueError, OSError, CheckpointError, SequenceError) as exc:
        print(f"rfnet {args.command}: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
