"""Isotonic and conformal recalibration of a deliberately overconfident model.

Trains the full model, shrinks its intervals about the median, fits both
calibrators on cal_fit and prints coverage on cal_eval.

    python scripts/calibration_demo.py --seed 0 --shrink 0.5
"""

import argparse

import numpy as np

from btload import calibration as cal
from btload import experiment as ex
from btload.benchmark import benchmark_config
from btload.metrics import picp
from btload.model import DEFAULT_LEVELS


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--hours", type=int, default=None)
    ap.add_argument("--shrink", type=float, default=0.5)
    args = ap.parse_args()
    exp = benchmark_config(args.seed, hours=args.hours)
    data = ex.prepare_data(exp)
    full = [c for label, c, _ in ex.ablation_ladder(exp.model) if label == "E"][0]
    model, _ = ex.fit(exp, data, full)

    def shrunk(partition):
        ds, q = ex.forecast(model, data, partition, exp.T, exp.seed)
        med = q[..., 3:4]
        return ds, med + args.shrink * (q - med)

    fit_ds, qf = shrunk("cal_fit")
    ev_ds, qe = shrunk("cal_eval")
    y = ev_ds.Y()
    iso = cal.fit_isotonic(qf, fit_ds.Y(), DEFAULT_LEVELS, fit_ds.partition)
    cqr = cal.fit_conformal(qf, fit_ds.Y(), DEFAULT_LEVELS, fit_ds.partition)
    variants = {"raw": qe, "isotonic": cal.calibrate_quantiles(iso, qe, DEFAULT_LEVELS),
                "conformal": cqr.apply_quantiles(qe, DEFAULT_LEVELS)}
    print("level map:", ", ".join(f"{a:g}->{c:.4f}" for a, c in iso.knots))
    print(f"{'variant':10s} {'PICP80':>7s} {'PICP90':>7s} {'mean |cov - a|':>15s}")
    for name, q in variants.items():
        cov = cal.coverage_by_level(q, y, DEFAULT_LEVELS)
        gap = np.mean(np.abs(cov - np.array(DEFAULT_LEVELS)))
        print(f"{name:10s} {picp(q[..., 1], q[..., 5], y):7.3f} {picp(q[..., 0], q[..., 6], y):7.3f} {gap:15.4f}")


if __name__ == "__main__":
    main()
