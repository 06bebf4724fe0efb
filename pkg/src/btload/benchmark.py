"""The synthetic benchmark used by the ablation and the acceptance runs."""

from __future__ import annotations

from dataclasses import replace

from .data import SynthConfig
from .experiment import ExperimentConfig

BENCHMARK_HOURS = 2 * 8760
BENCHMARK_STRIDE = 4
BENCHMARK_T = 30


def benchmark_config(seed: int, hours: int | None = None, **overrides) -> ExperimentConfig:
    """Two years of synthetic grid, desk model, every seed set to ``seed``."""
    exp = ExperimentConfig(synth=SynthConfig(hours=hours or BENCHMARK_HOURS), T=BENCHMARK_T,
                           stride_train=BENCHMARK_STRIDE)
    if overrides:
        exp = replace(exp, **overrides)
    return exp.with_seed(seed)
