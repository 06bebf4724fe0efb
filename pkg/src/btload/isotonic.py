"""Isotonic regression by pool-adjacent-violators."""

from __future__ import annotations

import numpy as np


def pava(values, weights=None) -> np.ndarray:
    """Return the L2-nearest non-decreasing sequence to ``values``.

    Adjacent blocks whose means violate the ordering are merged into their
    weighted mean until the block means are non-decreasing.
    """
    y = np.asarray(values, dtype=np.float64)
    if y.ndim != 1:
        raise ValueError("pava expects a one-dimensional sequence")
    n = y.size
    if n <= 1:
        return y.copy()
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=np.float64)
    if w.shape != y.shape or np.any(w <= 0):
        raise ValueError("weights must be positive and match values")

    means: list[float] = []
    wsum: list[float] = []
    counts: list[int] = []
    for yi, wi in zip(y, w):
        means.append(float(yi))
        wsum.append(float(wi))
        counts.append(1)
        while len(means) > 1 and means[-2] > means[-1]:
            m2, w2, c2 = means.pop(), wsum.pop(), counts.pop()
            w1 = wsum[-1]
            means[-1] = (means[-1] * w1 + m2 * w2) / (w1 + w2)
            wsum[-1] = w1 + w2
            counts[-1] += c2
    return np.repeat(means, counts)


def monotone_rows(matrix) -> np.ndarray:
    """Apply :func:`pava` to every row of ``matrix`` (last axis).

    Rows that are already non-decreasing are returned untouched.
    """
    q = np.array(matrix, dtype=np.float64, copy=True)
    flat = q.reshape(-1, q.shape[-1])
    bad = np.nonzero(np.any(np.diff(flat, axis=-1) < 0, axis=-1))[0]
    for i in bad:
        flat[i] = pava(flat[i])
    return flat.reshape(q.shape)
