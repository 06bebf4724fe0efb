"""Monte-Carlo predictive inference and the aleatoric/epistemic split."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .isotonic import monotone_rows
from .model import DEFAULT_LEVELS, BTModel, Noise

POOLING = ("mean", "mixture")


@dataclass
class MCSampleSet:
    """``samples[t]`` is pass ``t``'s non-crossing quantile output, shape ``(..., H, K)``."""

    samples: np.ndarray
    levels: tuple[float, ...]
    seed: int

    def __post_init__(self):
        if self.samples.shape[0] < 1:
            raise ValueError("need at least one pass")

    @property
    def T(self) -> int:
        return int(self.samples.shape[0])

    @property
    def pass_keys(self) -> list[tuple[int, int]]:
        return [(self.seed, t) for t in range(self.T)]

    def median_index(self) -> int:
        return _median_index(self.levels)


@dataclass
class PredictiveDistribution:
    levels: tuple[float, ...]
    mean: np.ndarray
    epistemic_var: np.ndarray
    aleatoric_var: np.ndarray
    pooled_quantiles: np.ndarray

    @property
    def total_var(self) -> np.ndarray:
        return self.aleatoric_var + self.epistemic_var

    def to_mw(self, scaler) -> dict[str, np.ndarray]:
        return {
            "quantiles": scaler.load_to_mw(self.pooled_quantiles),
            "mean": scaler.load_to_mw(self.mean),
            "aleatoric_var": scaler.load_var_to_mw2(self.aleatoric_var),
            "epistemic_var": scaler.load_var_to_mw2(self.epistemic_var),
        }


def _median_index(levels) -> int:
    for k, a in enumerate(levels):
        if abs(a - 0.5) < 1e-12:
            return k
    raise ValueError("the level set must contain 0.5")


def predict_mc(model: BTModel, X, T: int, seed: int, chunk: int = 4096) -> MCSampleSet:
    """Run ``T`` stochastic passes; pass ``t`` draws from the stream keyed ``(seed, t)``.

    Inputs beyond ``chunk`` windows are split, with chunk ``c`` of pass
    ``t`` keyed ``(seed, t, c)``.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    X = np.asarray(X, dtype=np.float64)
    single = X.ndim == 2
    if single:
        X = X[None]
    out = []
    for t in range(T):
        if X.shape[0] <= chunk:
            out.append(model.predict(X, "stochastic", Noise(seed, (t,))))
        else:
            parts = [
                model.predict(X[s : s + chunk], "stochastic", Noise(seed, (t, c)))
                for c, s in enumerate(range(0, X.shape[0], chunk))
            ]
            out.append(np.concatenate(parts, axis=0))
    samples = np.stack(out)
    if single:
        samples = samples[:, 0]
    return MCSampleSet(samples, tuple(model.cfg.quantile_levels), int(seed))


def quantile_variance(quantiles, levels) -> np.ndarray:
    """Variance of the distribution implied by a quantile vector (last axis).

    The CDF is linear between consecutive quantiles and the tails are
    clamped: mass ``levels[0]`` sits at ``q[0]`` and ``1 - levels[-1]`` at
    ``q[-1]``.
    """
    q = np.asarray(quantiles, dtype=np.float64)
    lv = np.asarray(levels, dtype=np.float64)
    if lv.size == 1:
        return np.zeros(q.shape[:-1])
    c = q - q[..., lv.size // 2 : lv.size // 2 + 1]  # centre for accuracy
    a, b = c[..., :-1], c[..., 1:]
    m = np.diff(lv)
    m_lo, m_hi = lv[0], 1.0 - lv[-1]
    e1 = m_lo * c[..., 0] + m_hi * c[..., -1] + np.sum(m * (a + b) / 2.0, axis=-1)
    e2 = m_lo * c[..., 0] ** 2 + m_hi * c[..., -1] ** 2 + np.sum(m * (a * a + a * b + b * b) / 3.0, axis=-1)
    return np.maximum(e2 - e1 * e1, 0.0)


def combine_passes(pass_vars, pass_medians) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the per-pass variances and population variance of the medians (pass axis 0)."""
    med = np.asarray(pass_medians, dtype=np.float64)
    # shifting by pass 0 keeps identical passes at exactly zero spread
    return np.mean(np.asarray(pass_vars, dtype=np.float64), axis=0), np.var(med - med[:1], axis=0)


def decompose_uncertainty(mc: MCSampleSet) -> tuple[np.ndarray, np.ndarray]:
    """(aleatoric, epistemic) variances per horizon."""
    return combine_passes(quantile_variance(mc.samples, mc.levels), mc.samples[..., mc.median_index()])


def pool(mc: MCSampleSet, pooling: str = "mean") -> np.ndarray:
    """Pooled ``(..., H, K)`` quantiles.

    ``"mean"`` averages each cell across passes and re-monotonizes;
    ``"mixture"`` takes type-7 quantiles of all ``T*K`` values per horizon.
    """
    if pooling == "mean":
        return monotone_rows(np.mean(mc.samples, axis=0))
    if pooling == "mixture":
        s = np.moveaxis(mc.samples, 0, -2)
        flat = s.reshape(s.shape[:-2] + (-1,))
        return np.moveaxis(np.quantile(flat, mc.levels, axis=-1), 0, -1)
    raise ValueError(f"pooling must be one of {POOLING}")


def predictive_distribution(mc: MCSampleSet, pooling: str = "mean") -> PredictiveDistribution:
    aleatoric, epistemic = decompose_uncertainty(mc)
    mean = np.mean(mc.samples[..., mc.median_index()], axis=0)
    return PredictiveDistribution(tuple(mc.levels), mean, epistemic, aleatoric, pool(mc, pooling))


def empirical_quantiles(mc: MCSampleSet, levels: Sequence[float] = DEFAULT_LEVELS) -> np.ndarray:
    """Type-7 quantiles of the per-pass medians, shape ``(..., H, len(levels))``."""
    med = mc.samples[..., mc.median_index()]
    return np.moveaxis(np.quantile(med, list(levels), axis=0), 0, -1)


def forecast_quantiles(model: BTModel, X, T: int, seed: int, levels: Sequence[float] = DEFAULT_LEVELS,
                       pooling: str = "mean") -> np.ndarray:
    """Quantiles at ``levels`` from any model variant.

    Multi-quantile heads are pooled across passes.  A median-only head gets
    its interval from the spread of the pass medians; without any
    stochastic mechanism that spread is zero, giving a point forecast.
    """
    if not model.cfg.is_stochastic:
        T = 1
    mc = predict_mc(model, X, T, seed)
    if tuple(mc.levels) == tuple(levels):
        return pool(mc, pooling)
    if len(mc.levels) == 1:
        return empirical_quantiles(mc, levels)
    raise ValueError("requested levels differ from the model's level set")


def prediction_interval(dist: PredictiveDistribution, lo_level: float, hi_level: float):
    if not lo_level < hi_level:
        raise ValueError("lo_level must be below hi_level")
    idx = []
    for a in (lo_level, hi_level):
        hits = [k for k, lv in enumerate(dist.levels) if abs(lv - a) < 1e-12]
        if not hits:
            raise ValueError(f"level {a} not in the model's level set {dist.levels}")
        idx.append(hits[0])
    q = dist.pooled_quantiles
    return q[..., idx[0]], q[..., idx[1]]


def write_forecast_csv(path, origin_timestamps, dist: PredictiveDistribution, scaler) -> None:
    """One row per (origin, horizon); ``dist`` must be batched, shape ``(N, H, K)``."""
    mw = dist.to_mw(scaler)
    q, mean, ale, epi = mw["quantiles"], mw["mean"], mw["aleatoric_var"], mw["epistemic_var"]
    if q.ndim != 3:
        raise ValueError("expected batched quantiles of shape (N, H, K)")
    origins = np.atleast_1d(origin_timestamps)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["origin_timestamp", "horizon_h", *[f"q{a:g}" for a in dist.levels],
                    "mean_mw", "aleatoric_var", "epistemic_var"])
        for i, o in enumerate(origins):
            stamp = np.datetime_as_string(np.datetime64(o, "h"), unit="h") + ":00:00Z"
            for h in range(q.shape[1]):
                w.writerow([stamp, h + 1, *[repr(float(v)) for v in q[i, h]], repr(float(mean[i, h])),
                            repr(float(ale[i, h])), repr(float(epi[i, h]))])
