"""Static SVG figures: reliability diagram, interval trace, training curves.

Output is byte-stable for fixed inputs: the SVG hash salt is pinned and
the date metadata is dropped.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

_RC = {"svg.hashsalt": "btload", "svg.fonttype": "none", "font.size": 9}


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="svg", metadata={"Date": None})
    plt.close(fig)
    return path


def reliability_plot(curves: dict[str, list[tuple[float, float]]], path, title: str = "Reliability") -> Path:
    """Nominal vs empirical coverage, one line per labelled curve."""
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(4.0, 4.0))
        ax.plot([0, 1], [0, 1], color="0.6", lw=0.8, ls="--", label="ideal")
        for label, curve in sorted(curves.items()):
            if not curve:
                continue
            a, c = zip(*curve)
            ax.plot(a, c, marker="o", ms=3, lw=1.2, label=label)
        ax.set_xlim(0, 1)
        ax.set_ylim(0, 1)
        ax.set_xlabel("nominal level")
        ax.set_ylabel("empirical coverage")
        ax.set_title(title)
        ax.legend(loc="upper left", frameon=False)
        fig.tight_layout()
        return _save(fig, path)


def interval_trace_plot(times, actual, median, bands: dict[str, tuple[np.ndarray, np.ndarray]], path,
                        title: str = "Forecast intervals") -> Path:
    """Actual load against the median and shaded interval bands (widest drawn first)."""
    t = np.arange(len(actual)) if times is None else np.asarray(times)
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(7.0, 3.0))
        order = sorted(bands.items(), key=lambda kv: -float(np.mean(kv[1][1] - kv[1][0])))
        for i, (label, (lo, hi)) in enumerate(order):
            ax.fill_between(t, lo, hi, color="C0", alpha=0.18 + 0.17 * i, lw=0, label=f"{label} interval")
        ax.plot(t, median, color="C0", lw=1.0, label="median")
        ax.plot(t, actual, color="k", lw=0.8, label="actual")
        ax.set_ylabel("load (MW)")
        ax.set_title(title)
        ax.legend(loc="upper right", frameon=False, ncol=2)
        fig.autofmt_xdate()
        fig.tight_layout()
        return _save(fig, path)


def history_plot(history, path) -> Path:
    with plt.rc_context(_RC):
        fig, ax = plt.subplots(figsize=(5.0, 3.0))
        ep = np.arange(len(history))
        ax.plot(ep, history.train_loss, label="train loss")
        ax.plot(ep, history.val_crps, label="val CRPS")
        if history.best_epoch >= 0:
            ax.axvline(history.best_epoch, color="0.6", lw=0.8, ls=":")
        ax.set_xlabel("epoch")
        ax.legend(frameon=False)
        fig.tight_layout()
        return _save(fig, path)
