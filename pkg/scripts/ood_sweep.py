"""Epistemic spread as lookback temperatures move past the training maximum.

    python scripts/ood_sweep.py --seed 0 --out results/ood
"""

import argparse
import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from btload import experiment as ex
from btload.benchmark import benchmark_config
from btload.ood import temperature_sweep


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hours", type=int, default=None)
    ap.add_argument("--points", type=int, default=20)
    ap.add_argument("--max-excess", type=float, default=20.0)
    ap.add_argument("--out", default="results/ood")
    args = ap.parse_args()
    exp = benchmark_config(args.seed, hours=args.hours)
    data = ex.prepare_data(exp)
    full = [c for label, c, _ in ex.ablation_ladder(exp.model) if label == "E"][0]
    model, _ = ex.fit(exp, data, full)
    excess = np.linspace(args.max_excess / args.points, args.max_excess, args.points)
    sweep = temperature_sweep(model, data, excess, T=exp.T, seed=exp.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("excess_C", "epistemic_std"))
        w.writerows(zip(excess.tolist(), sweep.epistemic_std.tolist()))
    with plt.rc_context({"svg.hashsalt": "btload"}):
        fig, ax = plt.subplots(figsize=(4.5, 3.0))
        ax.plot(excess, sweep.epistemic_std, marker="o", ms=3)
        ax.axhline(sweep.baseline_std, color="0.6", ls="--", lw=0.8, label="in distribution")
        ax.set_xlabel("lookback peak above training max (C)")
        ax.set_ylabel("epistemic std (standardized)")
        ax.legend(frameon=False)
        fig.tight_layout()
        fig.savefig(out / "sweep.svg", metadata={"Date": None})
    print(f"train max {sweep.train_max:.1f} C, baseline std {sweep.baseline_std:.4f}, Spearman {sweep.spearman:.3f}")


if __name__ == "__main__":
    main()
