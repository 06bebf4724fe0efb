"""Out-of-distribution probe: epistemic spread under temperatures beyond the training range."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.stats import spearmanr

from .data import PreparedData, apply_scaler, engineer_features
from .inference import decompose_uncertainty, predict_mc


@dataclass
class SweepResult:
    excess: np.ndarray  # degrees C above the training maximum
    epistemic_std: np.ndarray  # mean over windows and horizons, standardized units
    baseline_std: float  # same windows, unperturbed
    train_max: float

    @property
    def spearman(self) -> float:
        return float(spearmanr(self.excess, self.epistemic_std).statistic)


def spaced_origins(origins: np.ndarray, L: int, n: int) -> np.ndarray:
    """Up to ``n`` origins whose lookback windows do not overlap."""
    picked = []
    for o in np.sort(origins):
        if not picked or o - picked[-1] >= L:
            picked.append(int(o))
        if len(picked) == n:
            break
    return np.array(picked, dtype=np.int64)


def temperature_sweep(model, data: PreparedData, excesses, partition: str = "test", n_windows: int = 12,
                      T: int = 30, seed: int = 0) -> SweepResult:
    """Shift each lookback's temperature so its peak sits ``excess`` above the training maximum.

    Only the input rows move; heat index and wind chill are recomputed from
    the shifted temperature and everything is standardized with the
    training scaler.
    """
    ds = data.dataset
    series = data.series
    train_rows = ds.rows_of("train")
    train_max = float(np.nanmax(series.temperature[train_rows]))
    origins = spaced_origins(ds.origins[ds.partition == partition], ds.L, n_windows)
    if origins.size == 0:
        raise ValueError(f"partition {partition!r} has no windows")
    rows = origins[:, None] + np.arange(-ds.L + 1, 1)[None, :]

    def epistemic_std(temp):
        feats = apply_scaler(engineer_features(replace(series, temperature=temp)), data.scaler)
        _, epi = decompose_uncertainty(predict_mc(model, feats.values[rows], T, seed))
        return float(np.mean(np.sqrt(epi)))

    base = epistemic_std(series.temperature)
    stds = []
    for e in excesses:
        temp = series.temperature.copy()
        for r in rows:
            temp[r] += train_max + e - np.max(temp[r])
        stds.append(epistemic_std(temp))
    return SweepResult(np.asarray(excesses, dtype=np.float64), np.array(stds), base, train_max)
