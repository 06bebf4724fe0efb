"""End-to-end experiment plumbing shared by the CLI and the scripts."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import calibration as cal
from .data import PreparedData, SynthConfig, generate_synthetic, ingest_csv, load_events, prepare
from .inference import forecast_quantiles
from .metrics import MetricsReport, compute_report, regime_slice
from .model import DEFAULT_LEVELS, BTModel, ModelConfig
from .training import TrainConfig, TrainHistory, train

CALIBRATION_METHODS = ("none", "isotonic", "conformal")
PROFILES = ("desk", "full")
RUNGS = ("A", "B", "C", "D", "E", "F")


@dataclass
class ExperimentConfig:
    synth: SynthConfig | None = field(default_factory=SynthConfig)
    csv: str | None = None
    events: str | None = None
    model: ModelConfig = field(default_factory=ModelConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig.desk)
    T: int = 50
    seed: int = 0
    calibration: str = "isotonic"
    stride_train: int = 1
    profile: str = "desk"

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.calibration not in CALIBRATION_METHODS:
            raise ValueError(f"calibration must be one of {CALIBRATION_METHODS}")
        if self.profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        if self.T < 1 or self.stride_train < 1:
            raise ValueError("T and stride_train must be >= 1")
        if (self.synth is None) == (self.csv is None):
            raise ValueError("give exactly one data source: synth or csv")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict, profile: str | None = None) -> "ExperimentConfig":
        d = dict(d)
        profile = profile or d.get("profile", "desk")
        if profile not in PROFILES:
            raise ValueError(f"profile must be one of {PROFILES}")
        model_base = ModelConfig.desk if profile == "desk" else ModelConfig.full
        train_base = TrainConfig.desk if profile == "desk" else TrainConfig.full
        model = model_base(**d.pop("model", {}) or {})
        tcfg = train_base(**d.pop("train", {}) or {})
        if "csv" in d and d["csv"] is not None:
            synth = None
            d.pop("synth", None)
        else:
            synth = SynthConfig(**(d.pop("synth", None) or {}))
        d["profile"] = profile
        return cls(synth=synth, model=model, train=tcfg, **d)

    def with_seed(self, seed: int) -> "ExperimentConfig":
        """Same experiment with every seed (data, init, training) set to ``seed``."""
        synth = None if self.synth is None else replace(self.synth, seed=seed)
        return replace(self, seed=seed, synth=synth, model=replace(self.model, seed=seed),
                       train=replace(self.train, seed=seed))


def load_config(path, profile: str | None = None) -> ExperimentConfig:
    text = Path(path).read_text()
    if str(path).endswith((".yaml", ".yml")):
        import yaml

        d = yaml.safe_load(text) or {}
    else:
        d = json.loads(text)
    if not isinstance(d, dict):
        raise ValueError("config file must contain a mapping")
    return ExperimentConfig.from_dict(d, profile)


def load_series(exp: ExperimentConfig):
    if exp.csv is not None:
        return ingest_csv(exp.csv)
    return generate_synthetic(exp.synth)


def prepare_data(exp: ExperimentConfig, series=None) -> PreparedData:
    series = load_series(exp) if series is None else series
    events = None
    if exp.events is not None:
        events = load_events(exp.events)
    return prepare(series, exp.model.lookback, exp.model.horizon, stride_train=exp.stride_train, events=events)


def build_model(cfg: ModelConfig, d_in: int) -> BTModel:
    return BTModel(replace(cfg, d_in=d_in))


def fit(exp: ExperimentConfig, data: PreparedData, model_cfg: ModelConfig | None = None,
        log=None) -> tuple[BTModel, TrainHistory]:
    model = build_model(model_cfg or exp.model, data.dataset.d_in)
    return train(model, data.dataset, exp.train, log=log)


# ----------------------------------------------------------------------
# forecasting and scoring


def forecast(model: BTModel, data: PreparedData, partition: str, T: int, seed: int):
    ds = data.dataset.subset(partition)
    q = forecast_quantiles(model, ds.X(), T, seed, DEFAULT_LEVELS)
    return ds, q


def fit_calibrator(method: str, model: BTModel, data: PreparedData, T: int, seed: int):
    if method == "none":
        return cal.CalibrationMap.identity(DEFAULT_LEVELS)
    ds, q = forecast(model, data, "cal_fit", T, seed)
    if method == "isotonic":
        return cal.fit_isotonic(q, ds.Y(), DEFAULT_LEVELS, ds.partition)
    if method == "conformal":
        return cal.fit_conformal(q, ds.Y(), DEFAULT_LEVELS, ds.partition)
    raise ValueError(f"unknown calibration method {method!r}")


def apply_calibrator(calibrator, q: np.ndarray) -> np.ndarray:
    if calibrator is None:
        return q
    if isinstance(calibrator, cal.CalibrationMap):
        return cal.calibrate_quantiles(calibrator, q, DEFAULT_LEVELS)
    return calibrator.apply_quantiles(q, DEFAULT_LEVELS)


def score(q: np.ndarray, ds, scaler, intervals: bool = True) -> dict[str, MetricsReport]:
    return regime_slice(q, DEFAULT_LEVELS, ds.Y(), ds.event, load_scale=scaler.load_std,
                        load_offset=scaler.load_to_mw(0.0).item(), intervals=intervals)


def evaluate(model: BTModel, data: PreparedData, partition: str, T: int, seed: int, calibrator=None):
    ds, q = forecast(model, data, partition, T, seed)
    q = apply_calibrator(calibrator, q)
    return score(q, ds, data.scaler, intervals=model.cfg.is_stochastic), q


# ----------------------------------------------------------------------
# ablation ladder


def ablation_ladder(base: ModelConfig) -> list[tuple[str, ModelConfig, bool]]:
    """Rungs A-F as ``(label, model config, calibrate)``, each one toggle from the last."""
    a = replace(base, dropout_retention=1.0, variational=False, stochastic_attention=False, quantile_levels=(0.5,))
    b = replace(a, dropout_retention=base.dropout_retention if base.dropout_retention < 1 else 0.9)
    c = replace(b, variational=True)
    d = replace(c, stochastic_attention=True)
    e = replace(d, quantile_levels=DEFAULT_LEVELS)
    return [("A", a, False), ("B", b, False), ("C", c, False), ("D", d, False), ("E", e, False), ("F", e, True)]


ABLATION_COLUMNS = ("rung", "seed", "mae_mw", "rmse_mw", "crps", "crps_mw", "picp_90", "mpiw_90_mw")


def run_ablation(exp: ExperimentConfig, data: PreparedData | None = None, partition: str = "test",
                 log=None, models: dict | None = None, on_row=None) -> list[dict]:
    """Train and score every rung; rung F reuses rung E's model.

    ``models`` (if given) receives the trained models keyed by rung label;
    ``on_row`` is called with each finished row.
    """
    data = prepare_data(exp) if data is None else data
    rows = []
    trained: dict[str, BTModel] = {}
    for label, mcfg, calibrate in ablation_ladder(exp.model):
        if calibrate:
            model = trained["E"]
            calibrator = fit_calibrator("isotonic", model, data, exp.T, exp.seed)
        else:
            model, _ = fit(exp, data, mcfg)
            trained[label] = model
            calibrator = None
        reports, _ = evaluate(model, data, partition, exp.T, exp.seed, calibrator)
        r = reports["all"]
        rows.append({
            "rung": label, "seed": exp.seed, "mae_mw": r.mae_mw, "rmse_mw": r.rmse_mw, "crps": r.crps,
            "crps_mw": r.crps_mw, "picp_90": r.picp_90, "mpiw_90_mw": r.mpiw_90_mw,
        })
        if on_row:
            on_row(rows[-1])
        if log:
            log(f"rung {label}: crps {r.crps:.5f} picp_90 {r.picp_90}")
    if models is not None:
        models.update(trained)
    return rows
