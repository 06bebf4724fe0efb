"""Post-hoc recalibration: isotonic level remapping and split-conformal widening.

Both fitters refuse data tagged with any partition other than ``cal_fit``.
"""

from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import ndtr, ndtri

from .inference import pool, predict_mc
from .isotonic import monotone_rows, pava
from .metrics import measure_coverage

CLAMP_EPS = 1e-3
MAP_FORMAT = "btload-calibration/1"
CONFORMAL_FORMAT = "btload-conformal/1"


class LeakageError(AssertionError):
    """Raised when a calibrator is fitted on rows outside ``cal_fit``."""


def assert_cal_fit_only(partitions) -> None:
    if partitions is None:
        raise LeakageError("partition tags are required to fit a calibrator")
    tags = set(np.asarray(partitions, dtype=object).tolist())
    if tags != {"cal_fit"}:
        raise LeakageError(f"calibration must use cal_fit rows only, got {sorted(map(str, tags))}")


def coverage_by_level(quantiles, actuals, levels) -> np.ndarray:
    q = np.asarray(quantiles, dtype=np.float64)
    return np.array([measure_coverage(q[..., k], actuals) for k in range(len(levels))])


# ----------------------------------------------------------------------
# quantile reading beyond the model's levels


def quantile_at(quantiles, levels, a) -> np.ndarray:
    """Read quantile(s) at level(s) ``a`` from a ``(..., K)`` quantile array.

    Between knots the CDF is linear, so the quantile is linear in the level.
    Below the first and above the last knot the outer segment is continued
    linearly in probit space, the tail shape a Gaussian would have.
    """
    q = np.asarray(quantiles, dtype=np.float64)
    lv = np.asarray(levels, dtype=np.float64)
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    if np.any((a <= 0) | (a >= 1)):
        raise ValueError("levels must lie in (0, 1)")
    out = np.empty(q.shape[:-1] + a.shape)
    z = ndtri(lv)
    for i, ai in enumerate(a):
        hit = np.flatnonzero(lv == ai)
        if hit.size:
            out[..., i] = q[..., hit[0]]
        elif ai < lv[0] or ai > lv[-1]:
            j = 0 if ai < lv[0] else lv.size - 2
            dz = z[j + 1] - z[j]
            out[..., i] = q[..., j] + (q[..., j + 1] - q[..., j]) * (ndtri(ai) - z[j]) / dz
        else:
            j = min(max(np.searchsorted(lv, ai, side="right") - 1, 0), lv.size - 2)
            w = (ai - lv[j]) / (lv[j + 1] - lv[j])
            out[..., i] = q[..., j] + w * (q[..., j + 1] - q[..., j])
    return out


# ----------------------------------------------------------------------
# isotonic level map


@dataclass
class CalibrationMap:
    """Nominal level -> level to request from the model.

    ``coverage`` is the monotone (PAVA) empirical coverage curve measured on
    ``cal_fit``; ``calibrated`` holds its inverse evaluated at each nominal
    level.
    """

    levels: tuple[float, ...]
    calibrated: tuple[float, ...]
    coverage: tuple[float, ...] = ()
    method: str = "isotonic"
    eps: float = CLAMP_EPS
    meta: dict = field(default_factory=dict)

    @classmethod
    def identity(cls, levels, method: str = "none") -> "CalibrationMap":
        lv = tuple(float(a) for a in levels)
        return cls(lv, lv, lv, method)

    @property
    def knots(self) -> list[tuple[float, float]]:
        return list(zip(self.levels, self.calibrated))

    def __call__(self, a):
        a = np.asarray(a, dtype=np.float64)
        if np.any((a < self.eps) | (a > 1 - self.eps)):
            raise ValueError(f"requested level outside [{self.eps}, {1 - self.eps}]")
        out = np.interp(a, self.levels, self.calibrated)
        return float(out) if out.ndim == 0 else out

    def to_dict(self) -> dict:
        return {
            "format": MAP_FORMAT,
            "method": self.method,
            "eps": self.eps,
            "knots": [[a, c] for a, c in self.knots],
            "coverage": list(self.coverage),
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CalibrationMap":
        if d.get("format") != MAP_FORMAT:
            raise ValueError(f"unsupported calibration format {d.get('format')!r}")
        lv, cal = zip(*d["knots"])
        return cls(tuple(lv), tuple(cal), tuple(d.get("coverage", ())), d["method"], d["eps"], d.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "CalibrationMap":
        return cls.from_dict(json.loads(Path(path).read_text()))


def invert_coverage(levels, coverage, target, eps: float = CLAMP_EPS) -> float:
    """Level ``a`` at which the piecewise-linear curve ``levels -> coverage`` reaches ``target``.

    Flat stretches resolve to their midpoint.  Targets outside the curve's
    range are reached by extending the end segment linearly in probit space.
    """
    lv = np.asarray(levels, dtype=np.float64)
    c = np.asarray(coverage, dtype=np.float64)
    clip = lambda v: float(min(max(v, eps), 1.0 - eps))
    if c[0] <= target <= c[-1]:
        lo = int(np.searchsorted(c, target, side="left"))
        hi = int(np.searchsorted(c, target, side="right"))
        if lo < hi:  # target hit a knot value exactly (maybe a flat run)
            return clip(0.5 * (lv[lo] + lv[hi - 1]))
        j = lo - 1
        w = (target - c[j]) / (c[j + 1] - c[j])
        return clip(lv[j] + w * (lv[j + 1] - lv[j]))
    cc = np.clip(c, eps, 1.0 - eps)
    zc, za = ndtri(cc), ndtri(lv)
    if target < c[0]:
        j0, j1 = 0, 1
    else:
        j0, j1 = lv.size - 2, lv.size - 1
    dzc = zc[j1] - zc[j0]
    slope = (za[j1] - za[j0]) / dzc if dzc > 1e-12 else 1.0
    zt = ndtri(min(max(target, eps), 1.0 - eps))
    return clip(ndtr(za[j0] + slope * (zt - zc[j0])))


def fit_isotonic(forecasts, actuals, levels: Sequence[float], partitions, eps: float = CLAMP_EPS) -> CalibrationMap:
    """Fit the level map on ``cal_fit`` forecasts ``(N, H, K)`` and actuals ``(N, H)``."""
    assert_cal_fit_only(partitions)
    y = np.asarray(actuals, dtype=np.float64)
    levels = tuple(float(a) for a in levels)
    if y.size == 0:
        raise ValueError("cal_fit is empty")
    if np.all(y == y.reshape(-1)[0]):
        warnings.warn("degenerate cal_fit (all actuals identical); using the identity map", stacklevel=2)
        return CalibrationMap.identity(levels, method="isotonic")
    raw = coverage_by_level(forecasts, y, levels)
    curve = pava(raw)
    cal = tuple(invert_coverage(levels, curve, a, eps) for a in levels)
    cal = tuple(np.maximum.accumulate(cal).tolist())
    return CalibrationMap(levels, cal, tuple(curve.tolist()), "isotonic", eps, {"raw_coverage": raw.tolist()})


def calibrate_quantiles(cmap: CalibrationMap, pooled_quantiles, levels) -> np.ndarray:
    """Replace each level ``a`` by ``cmap(a)`` and read it off ``pooled_quantiles``."""
    target = cmap(np.asarray(levels, dtype=np.float64))
    return monotone_rows(quantile_at(pooled_quantiles, levels, target))


def apply_calibration(cmap: CalibrationMap, model, X, T: int, seed: int, pooling: str = "mean") -> np.ndarray:
    mc = predict_mc(model, X, T, seed)
    return calibrate_quantiles(cmap, pool(mc, pooling), mc.levels)


def coverage_table(levels, before, after) -> list[dict]:
    return [
        {"nominal": float(a), "before": float(b), "after": float(c)}
        for a, b, c in zip(levels, before, after)
    ]


# ----------------------------------------------------------------------
# split conformal


INTERVALS = {"80": (0.10, 0.90), "90": (0.05, 0.95)}


def conformal_rank(n: int, miss: float) -> int:
    k = math.ceil((n + 1) * (1.0 - miss) - 1e-9)
    if k > n:
        raise ValueError(f"n={n} too small for a {1 - miss:.0%} conformal interval (needs rank {k})")
    return k


def conformal_offset(lower, upper, y, miss: float) -> float:
    """k-th smallest CQR score, ``k = ceil((n + 1)(1 - miss))``."""
    lo, hi, y = (np.asarray(v, dtype=np.float64).reshape(-1) for v in (lower, upper, y))
    scores = np.maximum(lo - y, y - hi)
    k = conformal_rank(scores.size, miss)
    return float(np.partition(scores, k - 1)[k - 1])


@dataclass
class ConformalOffsets:
    offsets: dict[str, float]
    n: int

    def apply(self, lower, upper, name: str = "90"):
        off = self.offsets[name]
        return np.asarray(lower) - off, np.asarray(upper) + off

    def apply_quantiles(self, quantiles, levels) -> np.ndarray:
        """Widen the matching level pairs of a ``(..., K)`` quantile array."""
        q = np.array(quantiles, dtype=np.float64, copy=True)
        for name, (lo_a, hi_a) in INTERVALS.items():
            if name not in self.offsets:
                continue
            ks = [k for k, a in enumerate(levels) if abs(a - lo_a) < 1e-12 or abs(a - hi_a) < 1e-12]
            if len(ks) == 2:
                q[..., ks[0]] -= self.offsets[name]
                q[..., ks[1]] += self.offsets[name]
        return monotone_rows(q)

    def to_dict(self) -> dict:
        return {"format": CONFORMAL_FORMAT, "offsets": dict(self.offsets), "n": self.n}

    @classmethod
    def from_dict(cls, d: dict) -> "ConformalOffsets":
        if d.get("format") != CONFORMAL_FORMAT:
            raise ValueError(f"unsupported conformal format {d.get('format')!r}")
        return cls(dict(d["offsets"]), int(d["n"]))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def fit_conformal(forecasts, actuals, levels, partitions) -> ConformalOffsets:
    """Per-interval CQR offsets from ``cal_fit`` forecasts ``(N, H, K)``."""
    assert_cal_fit_only(partitions)
    q = np.asarray(forecasts, dtype=np.float64)
    y = np.asarray(actuals, dtype=np.float64)
    if y.size == 0:
        raise ValueError("cal_fit is empty")
    offsets = {}
    for name, (lo_a, hi_a) in INTERVALS.items():
        ks = [k for k, a in enumerate(levels) if abs(a - lo_a) < 1e-12 or abs(a - hi_a) < 1e-12]
        if len(ks) == 2:
            offsets[name] = conformal_offset(q[..., ks[0]], q[..., ks[1]], y, 1.0 - (hi_a - lo_a))
    return ConformalOffsets(offsets, int(y.size))
