"""Forecast scores: point errors, CRPS, interval coverage and width, Winkler.

Everything here is a pure function of arrays.  Quantile forecasts are laid
out with the level axis last, so ``quantiles[..., k]`` belongs to
``levels[k]`` and ``actuals`` has the shape of ``quantiles[..., 0]``.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

REGIMES = ("all", "normal", "heatwave", "cold_snap")


def _aligned(a, b, what="inputs"):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"{what} are not aligned: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError(f"empty {what}")
    return a, b


def point_metrics(medians, actuals) -> tuple[float, float]:
    m, y = _aligned(medians, actuals)
    err = y - m
    return float(np.mean(np.abs(err))), float(math.sqrt(np.mean(err * err)))


def pinball_array(y, q, alpha):
    u = np.asarray(y, dtype=np.float64) - np.asarray(q, dtype=np.float64)
    return u * (alpha - (u < 0))


def crps_samples(samples, y):
    """Energy-form CRPS of an empirical sample, ``E|X - y| - E|X - X'| / 2``.

    ``samples`` has draws on its last axis; ``y`` matches the leading axes.
    The pair term uses all ordered pairs (including ``i == j``), computed in
    O(n log n) from the sorted sample.
    """
    x = np.sort(np.asarray(samples, dtype=np.float64), axis=-1)
    n = x.shape[-1]
    if n < 1:
        raise ValueError("crps_samples needs at least one draw")
    y = np.asarray(y, dtype=np.float64)
    term1 = np.mean(np.abs(x - y[..., None]), axis=-1)
    w = 2.0 * np.arange(1, n + 1) - n - 1
    term2 = 2.0 * np.sum(x * w, axis=-1) / (n * n)
    out = term1 - 0.5 * term2
    return float(out) if out.ndim == 0 else out


def crps_quantile(quantiles, levels, y):
    """``(2/K) * sum_k pinball(y, q_k, alpha_k)`` for each forecast."""
    q = np.asarray(quantiles, dtype=np.float64)
    lv = np.asarray(levels, dtype=np.float64)
    if q.shape[-1] != lv.size:
        raise ValueError(f"expected {lv.size} quantiles per forecast, got {q.shape[-1]}")
    if np.any(np.diff(q, axis=-1) < 0):
        raise ValueError("crps_quantile needs non-decreasing quantiles")
    y = np.asarray(y, dtype=np.float64)
    out = 2.0 / lv.size * np.sum(pinball_array(y[..., None], q, lv), axis=-1)
    return float(out) if out.ndim == 0 else out


def _check_interval(lower, upper):
    lo, hi = _aligned(lower, upper, "interval bounds")
    if np.any(lo > hi):
        raise ValueError("crossed interval: lower bound above upper bound")
    return lo, hi


def picp(lower, upper, actuals) -> float:
    lo, hi = _check_interval(lower, upper)
    _, y = _aligned(lo, actuals)
    return float(np.mean((lo <= y) & (y <= hi)))


def mpiw(lower, upper) -> float:
    lo, hi = _check_interval(lower, upper)
    return float(np.mean(hi - lo))


def winkler_scores(lower, upper, y, alpha: float) -> np.ndarray:
    if not 0 < alpha < 1:
        raise ValueError("miss rate alpha must lie in (0, 1)")
    lo, hi = _check_interval(lower, upper)
    y = np.broadcast_to(np.asarray(y, dtype=np.float64), lo.shape)
    score = hi - lo
    score = score + (2.0 / alpha) * np.where(y < lo, lo - y, 0.0)
    score = score + (2.0 / alpha) * np.where(y > hi, y - hi, 0.0)
    return score


def winkler(lower, upper, y, alpha: float) -> float:
    return float(np.mean(winkler_scores(lower, upper, y, alpha)))


def measure_coverage(forecasts, actuals) -> float:
    """Fraction of cases with ``y <= q`` (ties count as covered)."""
    q, y = _aligned(forecasts, actuals)
    return float(np.mean(y <= q))


def reliability_curve(quantiles, levels, actuals) -> list[tuple[float, float]]:
    q = np.asarray(quantiles, dtype=np.float64)
    if q.shape[-1] != len(levels):
        raise ValueError("one quantile per level expected")
    return [(float(a), measure_coverage(q[..., k], actuals)) for k, a in enumerate(levels)]


# ----------------------------------------------------------------------
# reports


@dataclass
class MetricsReport:
    regime: str
    n_instances: int
    mae_mw: float
    rmse_mw: float
    crps: float
    crps_mw: float
    picp_80: float | None = None
    picp_90: float | None = None
    mpiw_80_mw: float | None = None
    mpiw_90_mw: float | None = None
    winkler_90: float | None = None
    reliability: list[tuple[float, float]] = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["reliability"] = [list(p) for p in self.reliability]
        return d

    FLAT_FIELDS = ("regime", "n_instances", "mae_mw", "rmse_mw", "crps", "crps_mw",
                   "picp_80", "picp_90", "mpiw_80_mw", "mpiw_90_mw", "winkler_90")


def _level_index(levels, a):
    for k, lv in enumerate(levels):
        if abs(lv - a) < 1e-12:
            return k
    return None


def compute_report(quantiles, levels, actuals, load_scale: float = 1.0, load_offset: float = 0.0,
                   regime: str = "all", intervals: bool = True) -> MetricsReport:
    """Score ``(N, H, K)`` standardized quantiles against ``(N, H)`` actuals.

    MW figures use ``value * load_scale + load_offset``.  Pass
    ``intervals=False`` for point forecasters; interval fields stay ``None``.
    """
    q = np.asarray(quantiles, dtype=np.float64)
    y = np.asarray(actuals, dtype=np.float64)
    levels = [float(a) for a in levels]
    k50 = _level_index(levels, 0.5)
    if k50 is None:
        raise ValueError("the level set must contain the median")
    mae, rmse = point_metrics(q[..., k50], y)
    crps = float(np.mean(crps_quantile(q, levels, y)))
    rep = MetricsReport(regime, int(q.shape[0]), mae * load_scale, rmse * load_scale, crps, crps * load_scale)
    if not intervals:
        return rep
    for nominal, lo_a, hi_a in ((80, 0.10, 0.90), (90, 0.05, 0.95)):
        lo_k, hi_k = _level_index(levels, lo_a), _level_index(levels, hi_a)
        if lo_k is None or hi_k is None:
            continue
        lo, hi = q[..., lo_k], q[..., hi_k]
        setattr(rep, f"picp_{nominal}", picp(lo, hi, y))
        setattr(rep, f"mpiw_{nominal}_mw", mpiw(lo, hi) * load_scale)
        if nominal == 90:
            lo_mw, hi_mw = lo * load_scale + load_offset, hi * load_scale + load_offset
            rep.winkler_90 = winkler(lo_mw, hi_mw, y * load_scale + load_offset, 0.10)
    rep.reliability = reliability_curve(q, levels, y)
    return rep


def regime_slice(quantiles, levels, actuals, events, **kwargs) -> dict[str, MetricsReport]:
    """Reports for the full set and for each regime with at least one instance.

    ``events`` holds one regime tag per forecast instance.
    """
    events = np.asarray(events, dtype=object)
    q = np.asarray(quantiles)
    if events.shape[0] != q.shape[0]:
        raise ValueError("event tags must align with forecast instances")
    out = {"all": compute_report(q, levels, actuals, regime="all", **kwargs)}
    for regime in REGIMES[1:]:
        mask = events == regime
        if mask.any():
            out[regime] = compute_report(q[mask], levels, np.asarray(actuals)[mask], regime=regime, **kwargs)
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def write_reports(reports: dict[str, MetricsReport], out_dir, stem: str = "metrics") -> list[Path]:
    """JSON, flat CSV and per-regime reliability CSVs; returns written paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    p = out_dir / f"{stem}.json"
    p.write_text(json.dumps({k: r.to_dict() for k, r in reports.items()}, indent=2, sort_keys=True) + "\n")
    paths.append(p)
    p = out_dir / f"{stem}.csv"
    with p.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsReport.FLAT_FIELDS)
        for r in reports.values():
            w.writerow([_fmt(getattr(r, f)) for f in MetricsReport.FLAT_FIELDS])
    paths.append(p)
    for name, r in reports.items():
        if not r.reliability:
            continue
        p = out_dir / f"reliability_{name}.csv"
        with p.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("nominal", "coverage"))
            for a, c in r.reliability:
                w.writerow((repr(a), repr(c)))
        paths.append(p)
    return paths


def summarize(values: Sequence[float]) -> dict:
    v = np.asarray(values, dtype=np.float64)
    return {"median": float(np.median(v)), "mean": float(np.mean(v)), "min": float(v.min()), "max": float(v.max())}
