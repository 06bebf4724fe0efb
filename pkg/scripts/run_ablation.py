"""Rungs A-F over several seeds on the synthetic benchmark.

    python scripts/run_ablation.py --seeds 0 1 2 3 4 --out results/ablation
"""

import argparse
import csv
import time
from collections import defaultdict
from pathlib import Path

import numpy as np

from btload.experiment import ABLATION_COLUMNS, RUNGS, run_ablation
from btload.benchmark import benchmark_config


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--hours", type=int, default=None)
    ap.add_argument("--out", default="results/ablation")
    args = ap.parse_args()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    t0 = time.time()
    rows = []
    with (out / "ablation.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, ABLATION_COLUMNS, lineterminator="\n")
        w.writeheader()

        def keep(row):
            rows.append(row)
            w.writerow(row)
            fh.flush()

        for s in args.seeds:
            run_ablation(benchmark_config(s, hours=args.hours), on_row=keep,
                         log=lambda m: print(f"[seed {s} {time.time() - t0:6.0f}s] {m}", flush=True))
    by = defaultdict(list)
    for r in rows:
        by[r["rung"]].append(r)
    print("rung  median CRPS  median PICP90")
    for k in RUNGS:
        crps = np.median([r["crps"] for r in by[k]])
        picp = [r["picp_90"] for r in by[k] if r["picp_90"] is not None]
        print(f"{k:4s}  {crps:11.5f}  {np.median(picp) if picp else float('nan'):13.4f}")


if __name__ == "__main__":
    main()
