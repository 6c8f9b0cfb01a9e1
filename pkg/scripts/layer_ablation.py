"""Held-out match score as a function of the number of detector layers N.

Trains one desk-scale model per N on the synthetic smoke corpus and writes
plot data (N, strategy, mean score) as CSV.

    python3 scripts/layer_ablation.py --layers 2,4,6,8,10 --iterations 200 --output runs/ablation
"""
import argparse
import csv
from pathlib import Path

from threadpoolctl import threadpool_limits

from rfnet.detector import DetectorConfig
from rfnet.evaluation import STRATEGIES, evaluate
from rfnet.experiments import run_smoke, smoke_config, smoke_corpus


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--layers", default="2,4,6,8,10")
    parser.add_argument("--iterations", type=int, default=200)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--k", type=int, default=128)
    parser.add_argument("--output", default="runs/ablation")
    args = parser.parse_args()

    out = Path(args.output)
    out.mkdir(parents=True, exist_ok=True)
    corpus = smoke_corpus(args.seed)
    rows = []
    for n in (int(v) for v in args.layers.split(",")):
        config = smoke_config(args.seed, args.iterations)
        config.detector = DetectorConfig(n_layers=n)
        with threadpool_limits(1):
            _, state, _ = run_smoke(config, corpus)
            report = evaluate(state, corpus.held_out_sequences(), k_list=(args.k,))
        for strategy in STRATEGIES:
            rows.append((n, strategy, report.mean_score(strategy, args.k)))
        rows.append((n, "repeatability", report.mean_repeatability(args.k)))
        print(f"N={n}: " + ", ".join(f"{s}={v}" for m, s, v in rows if m == n), flush=True)
    with open(out / "plot_n.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("n_layers", "series", "mean"))
        writer.writerows(rows)


if __name__ == "__main__":
    main()
