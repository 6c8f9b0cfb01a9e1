"""Desk-scale training run on synthetic pairs, with a held-out comparison against the untrained model.

    python3 scripts/smoke_train.py --output runs/smoke --iterations 500
"""
import argparse
import csv
import json
import time
from pathlib import Path

from threadpoolctl import threadpool_limits

from rfnet.checkpoint import save_checkpoint
from rfnet.evaluation import evaluate, write_report
from rfnet.experiments import description_curve, loss_drop, run_smoke, smoke_config, smoke_corpus
from rfnet.training import LOSS_KEYS, mean_losses


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--output", default="runs/smoke")
    parser.add_argument("--iterations", type=int, default=500)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--k", type=int, default=128, help="keypoints per image for the held-out comparison")
    args = parser.parse_args()

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    config = smoke_config(args.seed, args.iterations)
    corpus = smoke_corpus(args.seed)

    def progress(state, record):
        if record.iteration % 50 == 0:
            print(f"iteration {record.iteration}: {mean_losses(record)}", flush=True)

    start = time.perf_counter()
    with threadpool_limits(1):
        untrained, state, history = run_smoke(config, corpus, progress)
    elapsed = time.perf_counter() - start

    save_checkpoint(state, out / "trained.rfnw")
    save_checkpoint(untrained, out / "untrained.rfnw")
    with open(out / "loss_log.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("iteration",) + LOSS_KEYS)
        for record in history:
            losses = mean_losses(record)
            writer.writerow([record.iteration] + [losses[k] for k in LOSS_KEYS])

    summary = {"iterations": args.iterations, "seconds": elapsed}
    if args.iterations >= 40:
        summary["description_loss_drop"] = loss_drop(description_curve(history))
    for name, model in (("untrained", untrained), ("trained", state)):
        with threadpool_limits(1):
            report = evaluate(model, corpus.held_out_sequences(), k_list=(args.k,))
        write_report(report, out / f"report_{name}")
        summary[name] = {
            **{f"{s}_score": report.mean_score(s, args.k) for s in ("nn", "nnt", "nnr")},
            "repeatability": report.mean_repeatability(args.k),
        }
    (out / "summary.json").write_text(json.dumps(summary, indent=2))
    print(json.dumps(summary, indent=2))


if __name__ == "__main__":
    main()
