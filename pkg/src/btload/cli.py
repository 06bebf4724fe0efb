"""Command-line front end.

Exit codes: 0 success, 1 validation error (bad flags, config or data),
2 runtime failure (divergence, I/O, anything unexpected).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import calibration as cal
from . import experiment as ex
from . import plots
from .data import DataFormatError, Scaler, SynthConfig, generate_synthetic, label_extreme_events, save_events, write_csv
from .inference import predict_mc, predictive_distribution, write_forecast_csv
from .metrics import compute_report, write_reports
from .model import DEFAULT_LEVELS, load_checkpoint
from .training import TrainingDiverged, write_run_dir

log = logging.getLogger("btload")


class ValidationError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


# ----------------------------------------------------------------------
# helpers


def _experiment(args) -> ex.ExperimentConfig:
    if args.config:
        exp = ex.load_config(args.config, args.profile)
    else:
        exp = ex.ExperimentConfig.from_dict({}, args.profile or "desk")
    if getattr(args, "data", None):
        exp = replace(exp, csv=str(args.data), synth=None)
    if getattr(args, "hours", None) is not None:
        if exp.synth is None:
            raise ValidationError("--hours only applies to synthetic data")
        exp = replace(exp, synth=replace(exp.synth, hours=args.hours))
    if getattr(args, "events_file", None):
        exp = replace(exp, events=str(args.events_file))
    if getattr(args, "T", None) is not None:
        exp = replace(exp, T=args.T)
    if args.seed is not None:
        exp = exp.with_seed(args.seed)
    exp.validate()
    return exp


def _load_run(run_dir, ckpt: str = "best.ckpt"):
    run = Path(run_dir)
    for name in ("config.json", ckpt):
        if not (run / name).exists():
            raise ValidationError(f"{run / name} not found")
    exp = ex.ExperimentConfig.from_dict(json.loads((run / "config.json").read_text()))
    model, scaler_d, meta = load_checkpoint(run / ckpt)
    return exp, model, scaler_d


def _prepare_checked(exp: ex.ExperimentConfig, model, scaler_d):
    events_missing = exp.events is not None and not Path(exp.events).exists()
    if events_missing:
        warnings.warn(f"event sidecar {exp.events} not found; reporting the full slice only", stacklevel=2)
        exp = replace(exp, events=None)
    data = ex.prepare_data(exp)
    if scaler_d is not None:
        saved = Scaler.from_dict(scaler_d)
        same = saved.columns == data.scaler.columns and np.array_equal(saved.mean, data.scaler.mean) \
            and np.array_equal(saved.std, data.scaler.std)
        if not same:
            raise ValidationError("checkpoint scaler does not match the data rebuilt from config.json")
    if model.cfg.d_in != data.dataset.d_in or model.cfg.lookback != data.dataset.L or model.cfg.horizon != data.dataset.H:
        raise ValidationError("checkpoint shape does not match the configured data")
    return data, events_missing


def _load_calibrator(path):
    if path is None:
        return None
    d = json.loads(Path(path).read_text())
    if d.get("format") == cal.MAP_FORMAT:
        return cal.CalibrationMap.from_dict(d)
    if d.get("format") == cal.CONFORMAL_FORMAT:
        return cal.ConformalOffsets.from_dict(d)
    raise ValidationError(f"{path}: not a calibration artifact")


def _check_noncrossing(q, where: str) -> None:
    if not np.all(np.diff(q, axis=-1) >= 0):
        raise RuntimeError(f"crossed quantiles emitted in {where}")


def _out(args) -> Path:
    if not args.out:
        raise ValidationError("--out is required")
    return Path(args.out)


# ----------------------------------------------------------------------
# subcommands


def cmd_generate(args) -> int:
    cfg = SynthConfig(hours=args.hours, seed=args.seed or 0, event_count=args.events)
    series = generate_synthetic(cfg)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    write_csv(series, out / "series.csv")
    save_events(label_extreme_events(series), out / "events.json")
    log.info("wrote %d hours to %s", len(series), out)
    return 0


def cmd_train(args) -> int:
    exp = _experiment(args)
    out = _out(args)
    data = ex.prepare_data(exp)
    model, hist = ex.fit(exp, data, log=log.info)
    write_run_dir(out, model, hist, exp.to_dict(), data.scaler, meta={"seed": exp.seed})
    log.info("best epoch %d, val CRPS %.5f", hist.best_epoch, hist.val_crps[hist.best_epoch])
    return 0


def cmd_predict(args) -> int:
    exp, model, scaler_d = _load_run(args.run)
    seed = exp.seed if args.seed is None else args.seed
    T = exp.T if args.T is None else args.T
    data, _ = _prepare_checked(exp, model, scaler_d)
    ds = data.dataset.subset(args.partition)
    if len(ds) == 0:
        raise ValidationError(f"partition {args.partition!r} is empty")
    mc = predict_mc(model, ds.X(), T if model.cfg.is_stochastic else 1, seed)
    dist = predictive_distribution(mc)
    calibrator = _load_calibrator(args.calibration)
    if calibrator is not None:
        if tuple(dist.levels) != tuple(DEFAULT_LEVELS):
            raise ValidationError("calibration needs a model with the full level set")
        dist = replace(dist, pooled_quantiles=ex.apply_calibrator(calibrator, dist.pooled_quantiles))
    _check_noncrossing(dist.pooled_quantiles, "predict")
    write_forecast_csv(_out(args), ds.origin_timestamps(), dist, data.scaler)
    return 0


def cmd_calibrate(args) -> int:
    exp, model, scaler_d = _load_run(args.run)
    seed = exp.seed if args.seed is None else args.seed
    T = exp.T if args.T is None else args.T
    data, _ = _prepare_checked(exp, model, scaler_d)
    if tuple(model.cfg.quantile_levels) != tuple(DEFAULT_LEVELS):
        raise ValidationError("calibration needs a model with the full level set")
    calibrator = ex.fit_calibrator(args.method, model, data, T, seed)
    ds, q = ex.forecast(model, data, "cal_eval", T, seed)
    after = ex.apply_calibrator(calibrator, q)
    _check_noncrossing(after, "calibrate")
    y = ds.Y()
    table = cal.coverage_table(DEFAULT_LEVELS, cal.coverage_by_level(q, y, DEFAULT_LEVELS),
                               cal.coverage_by_level(after, y, DEFAULT_LEVELS))
    out = Path(args.out) if args.out else Path(args.run) / "calibration"
    out.mkdir(parents=True, exist_ok=True)
    calibrator.save(out / "calibration.json")
    with (out / "coverage_table.csv").open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("nominal", "before", "after"))
        for row in table:
            w.writerow((repr(row["nominal"]), repr(row["before"]), repr(row["after"])))
    gap = lambda k: np.mean([abs(r[k] - r["nominal"]) for r in table])
    log.info("cal_eval mean |coverage - nominal|: before %.4f, after %.4f", gap("before"), gap("after"))
    return 0


def cmd_evaluate(args) -> int:
    exp, model, scaler_d = _load_run(args.run)
    seed = exp.seed if args.seed is None else args.seed
    T = exp.T if args.T is None else args.T
    data, events_missing = _prepare_checked(exp, model, scaler_d)
    calibrator = _load_calibrator(args.calibration)
    ds, q = ex.forecast(model, data, args.partition, T, seed)
    q = ex.apply_calibrator(calibrator, q)
    _check_noncrossing(q, "evaluate")
    stochastic = model.cfg.is_stochastic
    if events_missing:
        y = ds.Y()
        reports = {"all": compute_report(q, DEFAULT_LEVELS, y, data.scaler.load_std,
                                         data.scaler.load_to_mw(0.0).item(), "all", stochastic)}
    else:
        reports = ex.score(q, ds, data.scaler, intervals=stochastic)
    out = Path(args.out) if args.out else Path(args.run) / "evaluation"
    write_reports(reports, out)
    if stochastic:
        plots.reliability_plot({k: r.reliability for k, r in reports.items()}, out / "reliability.svg")
    n = min(len(ds), args.trace_windows)
    mw = data.scaler.load_to_mw(q[:n])
    bands = {}
    if stochastic:
        bands = {"90%": (mw[..., 0].ravel(), mw[..., -1].ravel()), "80%": (mw[..., 1].ravel(), mw[..., -2].ravel())}
    times = ds.select(np.arange(len(ds)) < n).target_timestamps().ravel().astype("datetime64[s]").astype(object)
    plots.interval_trace_plot(times, data.scaler.load_to_mw(ds.Y()[:n]).ravel(), mw[..., 3].ravel(), bands,
                              out / "interval_trace.svg")
    r = reports["all"]
    log.info("CRPS %.5f  PICP90 %s  MAE %.1f MW", r.crps, r.picp_90, r.mae_mw)
    return 0


def cmd_ablate(args) -> int:
    exp = _experiment(args)
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    seeds = args.seeds if args.seeds else [exp.seed]
    path = out / "ablation.csv"
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(ex.ABLATION_COLUMNS)

        def write(row):
            w.writerow(["" if row[c] is None else (row[c] if isinstance(row[c], (str, int)) else repr(row[c]))
                        for c in ex.ABLATION_COLUMNS])
            fh.flush()

        for s in seeds:
            ex.run_ablation(exp.with_seed(s), log=log.info, on_row=write)
    return 0


def cmd_report(args) -> int:
    out = _out(args)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["# Results", ""]
    curves = {}
    for run in args.runs or []:
        m = Path(run) / "metrics.json"
        if not m.exists():
            m = Path(run) / "evaluation" / "metrics.json"
        if not m.exists():
            raise ValidationError(f"no metrics.json under {run}")
        reports = json.loads(m.read_text())
        lines += [f"## {run}", "", "| regime | n | CRPS | CRPS (MW) | PICP 80 | PICP 90 | MPIW 90 (MW) | Winkler 90 |",
                  "|---|---|---|---|---|---|---|---|"]
        for name, r in reports.items():
            cells = [r.get(k) for k in ("n_instances", "crps", "crps_mw", "picp_80", "picp_90", "mpiw_90_mw", "winkler_90")]
            lines.append("| " + " | ".join([name] + [_cell(c) for c in cells]) + " |")
            if r.get("reliability"):
                curves[f"{Path(run).name}:{name}"] = [tuple(x) for x in r["reliability"]]
        lines.append("")
    if args.ablation:
        rows = list(csv.DictReader(Path(args.ablation).open()))
        lines += ["## Ablation", "", "| " + " | ".join(ex.ABLATION_COLUMNS) + " |",
                  "|" + "---|" * len(ex.ABLATION_COLUMNS)]
        for row in rows:
            lines.append("| " + " | ".join(_cell(row[c]) for c in ex.ABLATION_COLUMNS) + " |")
        lines.append("")
    (out / "report.md").write_text("\n".join(lines))
    if curves:
        plots.reliability_plot(curves, out / "reliability.svg")
    return 0


def _cell(v) -> str:
    if v is None or v == "":
        return "-"
    try:
        f = float(v)
    except (TypeError, ValueError):
        return str(v)
    return f"{f:.4g}"


# ----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="experiment config (JSON or YAML)")
    shared.add_argument("--seed", type=int, default=None)
    shared.add_argument("--out", help="output path")
    shared.add_argument("--profile", choices=ex.PROFILES, default=None)
    shared.add_argument("-v", "--verbose", action="store_true")

    p = _Parser(prog="btload", description="Bayesian Transformer load forecasting experiments")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("generate", parents=[shared], help="write a synthetic series and its event labels")
    g.add_argument("--hours", type=int, default=8760)
    g.add_argument("--events", type=int, default=0, help="number of injected extreme events")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", parents=[shared], help="train a model into a run directory")
    t.add_argument("--hours", type=int, default=None)
    t.add_argument("--data", help="CSV series instead of synthetic data")
    t.add_argument("--events-file", help="event label sidecar (JSON)")
    t.set_defaults(func=cmd_train, T=None)

    for name, func, helptext in (("predict", cmd_predict, "write a forecast CSV"),
                                 ("evaluate", cmd_evaluate, "score a run and draw plots"),
                                 ("calibrate", cmd_calibrate, "fit a calibrator on cal_fit")):
        s = sub.add_parser(name, parents=[shared], help=helptext)
        s.add_argument("--run", required=True, help="run directory from `train`")
        s.add_argument("--T", type=int, default=None, help="Monte-Carlo passes")
        s.set_defaults(func=func)
        if name == "calibrate":
            s.add_argument("--method", choices=ex.CALIBRATION_METHODS, default="isotonic")
        else:
            s.add_argument("--partition", default="test", choices=("train", "cal_fit", "cal_eval", "test"))
            s.add_argument("--calibration", help="calibration.json from `calibrate`")
        if name == "evaluate":
            s.add_argument("--trace-windows", type=int, default=7)

    a = sub.add_parser("ablate", parents=[shared], help="train and score rungs A-F")
    a.add_argument("--seeds", type=int, nargs="*")
    a.add_argument("--hours", type=int, default=None)
    a.add_argument("--data", help="CSV series instead of synthetic data")
    a.add_argument("--T", type=int, default=None)
    a.set_defaults(func=cmd_ablate)

    r = sub.add_parser("report", parents=[shared], help="collect evaluations into a markdown report")
    r.add_argument("--runs", nargs="*", help="evaluation directories")
    r.add_argument("--ablation", help="ablation.csv")
    r.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as e:  # argparse exits on --help and on bad flags
        return e.code if isinstance(e.code, int) else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (ValidationError, DataFormatError, cal.LeakageError, ValueError, FileNotFoundError) as e:
        print(f"btload {args.command}: {e}", file=sys.stderr)
        return 1
    except (TrainingDiverged, OSError, RuntimeError) as e:
        print(f"btload {args.command}: {e}", file=sys.stderr)
        return 2
    except Exception as e:  # noqa: BLE001
        print(f"btload {args.command}: unexpected {type(e).__name__}: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
