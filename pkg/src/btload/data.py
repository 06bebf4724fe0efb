"""Load/weather series: synthesis, CSV ingestion, cleaning, features, windows.

Every series lives on a complete hourly grid.  Hours that are absent from the
source, flagged as outliers, or otherwise unusable are marked through the
boolean ``valid`` mask; channel values at such hours are NaN but nothing
downstream trusts a value without consulting the mask.
"""

from __future__ import annotations

import csv
import datetime as dt
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

HOUR = np.timedelta64(1, "h")

CSV_COLUMNS = (
    "timestamp",
    "load_mw",
    "temp_c",
    "humidity_pct",
    "wind_ms",
    "irradiance_wm2",
    "renew_share",
)
REQUIRED_COLUMNS = CSV_COLUMNS[:-1]

FEATURE_COLUMNS = (
    "load",
    "temperature",
    "humidity",
    "wind_speed",
    "irradiance",
    "heat_index",
    "wind_chill",
    "hour_sin",
    "hour_cos",
    "dow_sin",
    "dow_cos",
    "holiday",
    "weekend",
    "renew_share",
)
# Columns subject to standardization; calendar encodings and flags are not.
CONTINUOUS_COLUMNS = (
    "load",
    "temperature",
    "humidity",
    "wind_speed",
    "irradiance",
    "heat_index",
    "wind_chill",
    "renew_share",
)

DEFAULT_FRACTIONS = (0.667, 0.056, 0.056, 0.221)
PARTITIONS = ("train", "cal_fit", "cal_eval", "test")
EVENT_KINDS = ("normal", "heatwave", "cold_snap")


class DataFormatError(ValueError):
    """Malformed input file; ``line`` is the 1-based physical line number."""

    def __init__(self, message: str, line: int | None = None):
        super().__init__(message if line is None else f"line {line}: {message}")
        self.line = line


# ----------------------------------------------------------------------
# raw series


@dataclass
class LoadSeries:
    timestamps: np.ndarray  # datetime64[h], UTC, consecutive hours
    load: np.ndarray
    temperature: np.ndarray
    humidity: np.ndarray
    wind_speed: np.ndarray
    irradiance: np.ndarray
    renew_share: np.ndarray | None = None
    holiday_flag: np.ndarray | None = None
    weekend_flag: np.ndarray | None = None
    valid: np.ndarray | None = None

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype="datetime64[h]")
        n = self.timestamps.size
        for name in ("load", "temperature", "humidity", "wind_speed", "irradiance"):
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.shape != (n,):
                raise ValueError(f"channel {name!r} has length {arr.size}, expected {n}")
            setattr(self, name, arr)
        if self.renew_share is not None:
            self.renew_share = np.asarray(self.renew_share, dtype=np.float64)
            if self.renew_share.shape != (n,):
                raise ValueError("channel 'renew_share' has the wrong length")
        if n > 1 and np.any(np.diff(self.timestamps) != HOUR):
            raise ValueError("timestamps must be consecutive hours; mark gaps with the valid mask")
        if self.weekend_flag is None:
            self.weekend_flag = day_of_week(self.timestamps) >= 5
        if self.holiday_flag is None:
            self.holiday_flag = np.zeros(n, dtype=bool)
        self.weekend_flag = np.asarray(self.weekend_flag, dtype=bool)
        self.holiday_flag = np.asarray(self.holiday_flag, dtype=bool)
        observed = self._channels_finite()
        self.valid = observed if self.valid is None else np.asarray(self.valid, dtype=bool) & observed
        present = np.isfinite(self.load)
        if np.any(self.load[present] < 0):
            raise ValueError("load must be non-negative")

    def _channels_finite(self) -> np.ndarray:
        ok = np.isfinite(self.load)
        for arr in (self.temperature, self.humidity, self.wind_speed, self.irradiance):
            ok &= np.isfinite(arr)
        if self.renew_share is not None:
            ok &= np.isfinite(self.renew_share)
        return ok

    def __len__(self) -> int:
        return int(self.timestamps.size)

    def channels(self) -> dict[str, np.ndarray]:
        out = {
            "load": self.load,
            "temperature": self.temperature,
            "humidity": self.humidity,
            "wind_speed": self.wind_speed,
            "irradiance": self.irradiance,
        }
        if self.renew_share is not None:
            out["renew_share"] = self.renew_share
        return out

    def gap_runs(self) -> list[tuple[int, int]]:
        """(start, stop) index pairs of consecutive invalid hours."""
        return _runs(~self.valid)


def day_of_week(timestamps) -> np.ndarray:
    """Monday = 0 ... Sunday = 6."""
    days = np.asarray(timestamps, dtype="datetime64[D]").astype(np.int64)
    return (days + 3) % 7  # 1970-01-01 was a Thursday


def hour_of_day(timestamps) -> np.ndarray:
    return np.asarray(timestamps, dtype="datetime64[h]").astype(np.int64) % 24


def _runs(mask: np.ndarray) -> list[tuple[int, int]]:
    m = np.concatenate(([False], np.asarray(mask, dtype=bool), [False]))
    edges = np.flatnonzero(np.diff(m.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2])]


# ----------------------------------------------------------------------
# synthetic generator


@dataclass
class SynthConfig:
    """Parameters of the synthetic grid.

    Demand is ``base * diurnal(hour, weekend) * weekly(dow)`` plus a
    piecewise-quadratic temperature response that is flat between
    ``comfort_low`` and ``comfort_high`` plus AR(1) noise whose standard
    deviation grows linearly with ``|T - 16.5|``.
    """

    hours: int = 8760
    base_load_MW: float = 10_000.0
    seed: int = 0
    event_count: int = 0
    start: str = "2015-01-01T00"
    comfort_low: float = 15.0
    comfort_high: float = 18.0
    heating_coef: float = 0.0015
    cooling_coef: float = 0.0025
    noise_frac: float = 0.01
    noise_temp_slope: float = 0.08
    noise_ar: float = 0.8
    event_amplitude: float = 9.0
    event_days: int = 3

    MIN_HOURS = 24 * 14


def default_holidays(years: Iterable[int]) -> set[dt.date]:
    """Fixed-date public holidays used by the synthetic grid."""
    out = set()
    for y in years:
        out.update({dt.date(y, 1, 1), dt.date(y, 7, 4), dt.date(y, 12, 25), dt.date(y, 12, 26)})
    return out


def _holiday_mask(timestamps: np.ndarray, calendar) -> np.ndarray:
    if not calendar:
        return np.zeros(timestamps.size, dtype=bool)
    days = np.asarray(
        [np.datetime64(d, "D") for d in calendar], dtype="datetime64[D]"
    )
    return np.isin(timestamps.astype("datetime64[D]"), days)


def generate_synthetic(cfg: SynthConfig) -> LoadSeries:
    if cfg.hours < SynthConfig.MIN_HOURS:
        raise ValueError(f"hours={cfg.hours} below minimum {SynthConfig.MIN_HOURS}")
    if cfg.event_count < 0:
        raise ValueError("event_count must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(cfg.seed & (2**64 - 1)))
    n = cfg.hours
    ts = np.datetime64(cfg.start, "h") + np.arange(n) * HOUR
    hod = hour_of_day(ts)
    dow = day_of_week(ts)
    doy = (ts.astype("datetime64[D]") - ts.astype("datetime64[Y]").astype("datetime64[D]")).astype(
        np.float64
    )

    # temperature: seasonal + diurnal + smooth daily anomaly + hourly AR(1)
    day_idx = (ts.astype("datetime64[D]") - ts[0].astype("datetime64[D]")).astype(np.int64)
    n_days = int(day_idx[-1]) + 1
    daily_anom = rng.normal(0.0, 2.5, n_days + 1)
    frac = (np.arange(n) + int(hod[0]) - 12) / 24.0
    k = np.clip(np.floor(frac).astype(np.int64), 0, n_days - 1)
    w = np.clip(frac - np.floor(frac), 0.0, 1.0)
    anomaly = daily_anom[k] * (1 - w) + daily_anom[k + 1] * w
    seasonal = 12.0 - 11.0 * np.cos(2 * np.pi * (doy - 15.0) / 365.25)
    diurnal_t = 4.0 * np.cos(2 * np.pi * (hod - 15.0) / 24.0)
    temp = seasonal + diurnal_t + anomaly + _ar1(rng, n, 0.9, 0.5)
    temp = _suppress_spurious_runs(ts, temp, cfg.event_days)
    temp = _inject_events(rng, ts, temp, cfg)

    humidity = np.clip(65.0 - 1.2 * (temp - seasonal) + _ar1(rng, n, 0.95, 8.0), 5.0, 100.0)
    wind = np.clip(4.0 + _ar1(rng, n, 0.97, 2.0), 0.0, None)
    cloud = 1.0 / (1.0 + np.exp(-_ar1(rng, n, 0.97, 1.5)))
    daylight = 12.0 + 3.5 * np.sin(2 * np.pi * (doy - 80.0) / 365.25)
    sun = np.clip(np.sin(np.pi * (hod - (12.0 - daylight / 2)) / daylight), 0.0, None)
    irradiance = 900.0 * sun * (1.0 - 0.7 * cloud)
    renew = np.clip(0.08 + 0.25 * irradiance / 1000.0 + 0.02 * (wind - 4.0), 0.0, 1.0)

    holidays = default_holidays(range(int(str(ts[0])[:4]), int(str(ts[-1])[:4]) + 1))
    holiday = _holiday_mask(ts, holidays)
    weekend = dow >= 5

    load = cfg.base_load_MW * _diurnal_profile(hod, weekend | holiday) * np.where(
        weekend, 0.93, 1.0
    ) * np.where(holiday, 0.9, 1.0)
    load = load + cfg.base_load_MW * temperature_response(
        temp, cfg.comfort_low, cfg.comfort_high, cfg.heating_coef, cfg.cooling_coef
    )
    noise_sd = cfg.base_load_MW * cfg.noise_frac * (1.0 + cfg.noise_temp_slope * np.abs(temp - 16.5))
    load = np.clip(load + noise_sd * _ar1(rng, n, cfg.noise_ar, 1.0), 0.0, None)

    return LoadSeries(
        timestamps=ts,
        load=load,
        temperature=temp,
        humidity=humidity,
        wind_speed=wind,
        irradiance=irradiance,
        renew_share=renew,
        holiday_flag=holiday,
        weekend_flag=weekend,
    )


def temperature_response(temp, low=15.0, high=18.0, heating=0.0015, cooling=0.0025):
    """Per-unit demand added by heating below ``low`` and cooling above ``high``."""
    temp = np.asarray(temp, dtype=np.float64)
    return heating * np.clip(low - temp, 0.0, None) ** 2 + cooling * np.clip(temp - high, 0.0, None) ** 2


def _diurnal_profile(hod: np.ndarray, off_day: np.ndarray) -> np.ndarray:
    h = hod.astype(np.float64)
    shift = np.where(off_day, 1.5, 0.0)  # later, shallower ramp on weekends
    amp = np.where(off_day, 0.8, 1.0)
    return 1.0 + amp * (
        0.16 * np.sin(2 * np.pi * (h - 9.0 - shift) / 24.0)
        + 0.05 * np.sin(4 * np.pi * (h - 7.0 - shift) / 24.0)
    )


def _ar1(rng: np.random.Generator, n: int, phi: float, sd: float) -> np.ndarray:
    """Stationary AR(1) path with marginal standard deviation ``sd``."""
    eps = rng.normal(0.0, sd * math.sqrt(1 - phi * phi), n)
    out = np.empty(n)
    out[0] = rng.normal(0.0, sd)
    for i in range(1, n):
        out[i] = phi * out[i - 1] + eps[i]
    return out


def _daily_extremes(ts: np.ndarray, temp: np.ndarray):
    days = ts.astype("datetime64[D]")
    uniq, inv = np.unique(days, return_inverse=True)
    frame = pd.DataFrame({"d": inv, "t": temp})
    g = frame.groupby("d")["t"]
    return uniq, inv, g.max().to_numpy(), g.min().to_numpy()


def _month_of(days: np.ndarray) -> np.ndarray:
    return days.astype("datetime64[M]").astype(np.int64) % 12


def _monthly_thresholds(days, values, q):
    months = _month_of(days)
    thr = np.full(values.size, np.nan)
    for m in np.unique(months):
        sel = (months == m) & np.isfinite(values)
        if sel.any():
            thr[months == m] = np.percentile(values[sel], q)
    return thr


def _suppress_spurious_runs(ts, temp, min_days, max_iter=50):
    """Lower (raise) isolated days so base weather holds no extreme runs.

    Extreme events in the synthetic grid come only from injected
    excursions, so the base climate is nudged until no run of
    ``min_days`` threshold-exceeding days remains.
    """
    temp = temp.copy()
    for _ in range(max_iter):
        days, inv, dmax, dmin = _daily_extremes(ts, temp)
        hi = _monthly_thresholds(days, dmax, 95)
        lo = _monthly_thresholds(days, dmin, 5)
        changed = False
        for a, b in _runs(dmax > hi):
            if b - a >= min_days:
                for d in range(a + 1, b, min_days):
                    temp[inv == d] -= dmax[d] - hi[d] + 0.2
                changed = True
        for a, b in _runs(dmin < lo):
            if b - a >= min_days:
                for d in range(a + 1, b, min_days):
                    temp[inv == d] += lo[d] - dmin[d] + 0.2
                changed = True
        if not changed:
            break
    return temp


def _exceedance_capacity(n_days: int) -> int:
    """Days that can lie strictly above a type-7 95th percentile of n values."""
    return n_days - 1 - math.floor(0.95 * (n_days - 1))


def _inject_events(rng, ts, temp, cfg: SynthConfig):
    if cfg.event_count == 0:
        return temp
    days, inv, _, _ = _daily_extremes(ts, temp)
    full = np.bincount(inv, minlength=days.size) == 24
    months = _month_of(days)
    month_days = np.bincount(months, minlength=12)
    need = cfg.event_days
    usable = [m for m in range(12) if _exceedance_capacity(int(month_days[m])) >= need]
    if len(usable) == 0:
        raise ValueError(
            f"series too short to host {need}-day extreme events; "
            "each calendar month must appear at least twice"
        )
    temp = temp.copy()
    for kind, sign in (("heatwave", 1.0), ("cold_snap", -1.0)):
        order = list(rng.permutation(usable))
        chosen = [order[i % len(order)] for i in range(cfg.event_count)]
        taken: set[int] = set()
        for m in chosen:
            # one event per calendar-month instance; pick a random contiguous block
            cand = [
                d
                for d in range(days.size - need + 1)
                if months[d] == m
                and np.all(months[d : d + need] == m)
                and np.all(full[d : d + need])
                and not taken.intersection(range(d - need, d + 2 * need))
            ]
            if not cand:
                continue
            d0 = int(cand[rng.integers(len(cand))])
            taken.update(range(d0, d0 + need))
            for d in range(d0, d0 + need):
                temp[inv == d] += sign * cfg.event_amplitude
    return temp


# ----------------------------------------------------------------------
# CSV ingestion / export


def _parse_timestamp(text: str) -> np.datetime64:
    s = text.strip()
    if s.endswith("Z"):
        s = s[:-1] + "+00:00"
    stamp = dt.datetime.fromisoformat(s)
    if stamp.tzinfo is not None:
        stamp = stamp.astimezone(dt.timezone.utc).replace(tzinfo=None)
    if stamp.minute or stamp.second or stamp.microsecond:
        raise ValueError(f"timestamp {text!r} is not on the hour")
    return np.datetime64(stamp, "h")


def _parse_float(text: str) -> float:
    text = text.strip()
    return math.nan if text == "" else float(text)


def ingest_csv(path, holidays=None) -> LoadSeries:
    """Read the CSV exchange format into an hourly-gridded series."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise DataFormatError("empty file", line=1) from None
        missing = [c for c in REQUIRED_COLUMNS if c not in header]
        if missing:
            raise DataFormatError(f"missing required column(s): {', '.join(missing)}", line=1)
        col = {name: header.index(name) for name in CSV_COLUMNS if name in header}
        stamps: list[np.datetime64] = []
        rows: list[list[float]] = []
        for row_no, row in enumerate(reader, start=1):
            line = reader.line_num
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) != len(header):
                raise DataFormatError(f"row {row_no}: expected {len(header)} fields, got {len(row)}", line)
            try:
                stamp = _parse_timestamp(row[col["timestamp"]])
                values = [_parse_float(row[col[c]]) if c in col else math.nan for c in CSV_COLUMNS[1:]]
            except ValueError as exc:
                raise DataFormatError(f"row {row_no}: unparseable ({exc})", line) from None
            if stamps:
                if stamp == stamps[-1]:
                    raise DataFormatError(f"row {row_no}: duplicate timestamp {stamp}", line)
                if stamp < stamps[-1]:
                    raise DataFormatError(
                        f"row {row_no}: timestamp {stamp} earlier than previous row (non-monotone)", line
                    )
            stamps.append(stamp)
            rows.append(values)
    if not stamps:
        raise DataFormatError("no data rows", line=2)

    t0 = stamps[0]
    idx = (np.asarray(stamps, dtype="datetime64[h]") - t0).astype(np.int64)
    n = int(idx[-1]) + 1
    grid = np.full((n, len(CSV_COLUMNS) - 1), np.nan)
    grid[idx] = np.asarray(rows, dtype=np.float64)
    ts = t0 + np.arange(n) * HOUR
    has_renew = "renew_share" in col
    series = LoadSeries(
        timestamps=ts,
        load=grid[:, 0],
        temperature=grid[:, 1],
        humidity=grid[:, 2],
        wind_speed=grid[:, 3],
        irradiance=grid[:, 4],
        renew_share=grid[:, 5] if has_renew else None,
        holiday_flag=_holiday_mask(ts, holidays),
    )
    return series


def _fmt(v: float) -> str:
    return "" if not np.isfinite(v) else repr(float(v))


def write_csv(series: LoadSeries, path) -> None:
    path = Path(path)
    renew = series.renew_share
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for i in range(len(series)):
            if _row_empty(series, i):
                continue  # absent hour: leave the gap implicit
            writer.writerow(
                [
                    f"{series.timestamps[i]}:00:00Z",
                    _fmt(series.load[i]),
                    _fmt(series.temperature[i]),
                    _fmt(series.humidity[i]),
                    _fmt(series.wind_speed[i]),
                    _fmt(series.irradiance[i]),
                    "" if renew is None else _fmt(renew[i]),
                ]
            )


def _row_empty(series: LoadSeries, i: int) -> bool:
    return all(not np.isfinite(arr[i]) for arr in series.channels().values())


# ----------------------------------------------------------------------
# cleaning


def clean_series(series: LoadSeries, window: int = 168, n_sigma: float = 3.0, max_gap: int = 6):
    """Flag rolling-median outliers in load, then fill short gaps.

    Returns ``(cleaned, outlier_mask)``.  Gaps longer than ``max_gap`` hours
    stay invalid and are excluded from windowing downstream.
    """
    if len(series) < window:
        raise ValueError(f"series length {len(series)} shorter than cleaning window {window}")
    load = pd.Series(series.load)
    roll = load.rolling(window, center=True, min_periods=window // 4)
    med = roll.median().to_numpy()
    sd = roll.std(ddof=0).to_numpy()
    dev = np.abs(load.to_numpy() - med)
    outliers = np.isfinite(dev) & np.isfinite(sd) & (sd > 0) & (dev > n_sigma * sd)

    channels = {k: v.copy() for k, v in series.channels().items()}
    channels["load"][outliers] = np.nan
    for arr in channels.values():
        _interpolate_short_gaps(arr, max_gap)

    cleaned = replace(
        series,
        load=channels["load"],
        temperature=channels["temperature"],
        humidity=channels["humidity"],
        wind_speed=channels["wind_speed"],
        irradiance=channels["irradiance"],
        renew_share=channels.get("renew_share"),
        valid=None,
    )
    return cleaned, outliers


def _interpolate_short_gaps(arr: np.ndarray, max_gap: int) -> None:
    for a, b in _runs(~np.isfinite(arr)):
        if b - a > max_gap or a == 0 or b == arr.size:
            continue
        left, right = arr[a - 1], arr[b]
        steps = np.arange(1, b - a + 1) / (b - a + 1)
        arr[a:b] = left + (right - left) * steps


# ----------------------------------------------------------------------
# features


def heat_index(temp_c, rh_pct) -> np.ndarray:
    """NWS heat index (Rothfusz regression with the NWS adjustments), in °C.

    Applied only when T >= 26.7 °C (80 °F); below that the air temperature is
    returned unchanged.
    """
    t_c = np.asarray(temp_c, dtype=np.float64)
    rh = np.asarray(rh_pct, dtype=np.float64)
    t = t_c * 9.0 / 5.0 + 32.0
    hi = (
        -42.379
        + 2.04901523 * t
        + 10.14333127 * rh
        - 0.22475541 * t * rh
        - 6.83783e-3 * t * t
        - 5.481717e-2 * rh * rh
        + 1.22874e-3 * t * t * rh
        + 8.5282e-4 * t * rh * rh
        - 1.99e-6 * t * t * rh * rh
    )
    with np.errstate(invalid="ignore"):
        low_rh = (rh < 13) & (t >= 80) & (t <= 112)
        adj_low = ((13 - rh) / 4) * np.sqrt(np.clip((17 - np.abs(t - 95.0)) / 17, 0.0, None))
        high_rh = (rh > 85) & (t >= 80) & (t <= 87)
        adj_high = ((rh - 85) / 10) * ((87 - t) / 5)
    hi = np.where(low_rh, hi - adj_low, hi)
    hi = np.where(high_rh, hi + adj_high, hi)
    hi_c = (hi - 32.0) * 5.0 / 9.0
    return np.where(t_c >= 26.7, hi_c, t_c)


def wind_chill(temp_c, wind_ms) -> np.ndarray:
    """NWS/Environment Canada wind chill index (2001 formula), in °C.

    Applied only when T <= 10 °C and wind >= 1.34 m/s (4.8 km/h).
    """
    t = np.asarray(temp_c, dtype=np.float64)
    v_kmh = np.asarray(wind_ms, dtype=np.float64) * 3.6
    with np.errstate(invalid="ignore"):
        v16 = np.power(np.clip(v_kmh, 0.0, None), 0.16)
        wc = 13.12 + 0.6215 * t - 11.37 * v16 + 0.3965 * t * v16
        active = (t <= 10.0) & (v_kmh >= 4.8)
    return np.where(active, wc, t)


@dataclass
class Scaler:
    columns: tuple[str, ...]
    mean: np.ndarray
    std: np.ndarray
    constant: np.ndarray  # columns left unscaled because their training std was 0

    def transform(self, values: np.ndarray) -> np.ndarray:
        return (values - self.mean) / self.std

    def inverse(self, values: np.ndarray) -> np.ndarray:
        return values * self.std + self.mean

    def load_to_mw(self, y) -> np.ndarray:
        i = self.columns.index("load")
        return np.asarray(y) * self.std[i] + self.mean[i]

    def load_var_to_mw2(self, var) -> np.ndarray:
        return np.asarray(var) * self.load_std**2

    @property
    def load_std(self) -> float:
        return float(self.std[self.columns.index("load")])

    def to_dict(self) -> dict:
        return {
            "columns": list(self.columns),
            "mean": self.mean.tolist(),
            "std": self.std.tolist(),
            "constant": self.constant.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Scaler":
        return cls(
            columns=tuple(d["columns"]),
            mean=np.asarray(d["mean"], dtype=np.float64),
            std=np.asarray(d["std"], dtype=np.float64),
            constant=np.asarray(d["constant"], dtype=bool),
        )


@dataclass
class FeatureMatrix:
    timestamps: np.ndarray
    values: np.ndarray  # (n_hours, n_features)
    valid: np.ndarray
    columns: tuple[str, ...] = FEATURE_COLUMNS
    scaler: Scaler | None = None

    def __len__(self) -> int:
        return int(self.values.shape[0])

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.columns.index(name)]


def engineer_features(series: LoadSeries, holiday_calendar=None) -> FeatureMatrix:
    hod = hour_of_day(series.timestamps).astype(np.float64)
    dow = day_of_week(series.timestamps).astype(np.float64)
    holiday = series.holiday_flag | _holiday_mask(series.timestamps, holiday_calendar)
    renew = series.renew_share if series.renew_share is not None else np.zeros(len(series))
    cols = {
        "load": series.load,
        "temperature": series.temperature,
        "humidity": series.humidity,
        "wind_speed": series.wind_speed,
        "irradiance": series.irradiance,
        "heat_index": heat_index(series.temperature, series.humidity),
        "wind_chill": wind_chill(series.temperature, series.wind_speed),
        "hour_sin": np.sin(2 * np.pi * hod / 24.0),
        "hour_cos": np.cos(2 * np.pi * hod / 24.0),
        "dow_sin": np.sin(2 * np.pi * dow / 7.0),
        "dow_cos": np.cos(2 * np.pi * dow / 7.0),
        "holiday": holiday.astype(np.float64),
        "weekend": series.weekend_flag.astype(np.float64),
        "renew_share": renew,
    }
    values = np.column_stack([cols[c] for c in FEATURE_COLUMNS])
    valid = series.valid & np.all(np.isfinite(values), axis=1)
    return FeatureMatrix(timestamps=series.timestamps.copy(), values=values, valid=valid)


def fit_scaler(matrix: FeatureMatrix, train_rows) -> Scaler:
    """Per-column population mean/std over valid training rows only."""
    rows = np.zeros(len(matrix), dtype=bool)
    train_rows = np.asarray(train_rows)
    if train_rows.dtype == bool:
        rows[:] = train_rows
    else:
        rows[train_rows] = True
    rows &= matrix.valid
    if not rows.any():
        raise ValueError("empty training partition: cannot fit scaler")
    sub = matrix.values[rows]
    ncol = len(matrix.columns)
    mean = np.zeros(ncol)
    std = np.ones(ncol)
    constant = np.zeros(ncol, dtype=bool)
    for j, name in enumerate(matrix.columns):
        if name not in CONTINUOUS_COLUMNS:
            continue
        m = sub[:, j].mean()
        s = sub[:, j].std()
        if not s > 1e-12:
            constant[j] = True
            continue
        mean[j], std[j] = m, s
    return Scaler(columns=tuple(matrix.columns), mean=mean, std=std, constant=constant)


def apply_scaler(matrix: FeatureMatrix, scaler: Scaler) -> FeatureMatrix:
    if tuple(scaler.columns) != tuple(matrix.columns):
        raise ValueError("scaler columns do not match feature matrix")
    return replace(matrix, values=scaler.transform(matrix.values), scaler=scaler)


# ----------------------------------------------------------------------
# extreme events


@dataclass(frozen=True)
class EventLabel:
    kind: str
    start: np.datetime64  # inclusive
    end: np.datetime64  # exclusive

    @property
    def hours(self) -> int:
        return int((self.end - self.start) / HOUR)

    def to_dict(self) -> dict:
        return {"kind": self.kind, "start": f"{self.start}:00:00Z", "end": f"{self.end}:00:00Z"}

    @classmethod
    def from_dict(cls, d: dict) -> "EventLabel":
        return cls(d["kind"], _parse_timestamp(d["start"]), _parse_timestamp(d["end"]))


def label_extreme_events(
    series: LoadSeries, high_pct: float = 95.0, low_pct: float = 5.0, min_days: int = 3
) -> list[EventLabel]:
    """Heatwaves and cold snaps from monthly daily-extreme percentiles.

    A heatwave is a run of at least ``min_days`` consecutive days whose daily
    maximum temperature lies strictly above that calendar month's
    ``high_pct`` percentile of daily maxima (percentiles over the whole
    series, linear interpolation).  Cold snaps mirror this with daily minima.
    """
    ts = series.timestamps
    if len(series) == 0 or (ts[-1] - ts[0]) / HOUR < 24 * 28 - 1:
        raise ValueError("series must span at least one calendar month")
    temp = np.where(np.isfinite(series.temperature), series.temperature, np.nan)
    days = ts.astype("datetime64[D]")
    uniq, inv = np.unique(days, return_inverse=True)
    frame = pd.DataFrame({"d": inv, "t": temp})
    grouped = frame.groupby("d")["t"]
    dmax = grouped.max().reindex(range(uniq.size)).to_numpy()
    dmin = grouped.min().reindex(range(uniq.size)).to_numpy()
    hi = _monthly_thresholds(uniq, dmax, high_pct)
    lo = _monthly_thresholds(uniq, dmin, low_pct)
    with np.errstate(invalid="ignore"):
        hot = np.isfinite(dmax) & (dmax > hi)
        cold = np.isfinite(dmin) & (dmin < lo)

    first, last = ts[0], ts[-1] + HOUR
    events: list[EventLabel] = []
    for kind, flags in (("heatwave", hot), ("cold_snap", cold)):
        for a, b in _runs(flags):
            if b - a < min_days:
                continue
            start = max(uniq[a].astype("datetime64[h]"), first)
            end = min((uniq[b - 1] + np.timedelta64(1, "D")).astype("datetime64[h]"), last)
            events.append(EventLabel(kind, start, end))
    events.sort(key=lambda e: (e.start, e.kind))
    return events


def hourly_event_codes(timestamps: np.ndarray, events: Sequence[EventLabel]) -> np.ndarray:
    """Per-hour index into ``EVENT_KINDS`` (0 = normal)."""
    codes = np.zeros(np.asarray(timestamps).size, dtype=np.int8)
    for ev in events:
        sel = (timestamps >= ev.start) & (timestamps < ev.end)
        codes[sel] = EVENT_KINDS.index(ev.kind)
    return codes


def save_events(events: Sequence[EventLabel], path) -> None:
    Path(path).write_text(json.dumps([e.to_dict() for e in events], indent=2) + "\n", encoding="utf-8")


def load_events(path) -> list[EventLabel]:
    return [EventLabel.from_dict(d) for d in json.loads(Path(path).read_text(encoding="utf-8"))]


# ----------------------------------------------------------------------
# windows and partitions


@dataclass
class WindowDataset:
    """Sliding windows over a feature matrix, stored as origin indices.

    Window ``i`` uses rows ``origins[i] - L + 1 .. origins[i]`` as input and
    the target column at rows ``origins[i] + 1 .. origins[i] + H``.
    """

    values: np.ndarray
    timestamps: np.ndarray
    origins: np.ndarray
    L: int
    H: int
    target_col: int = 0
    partition: np.ndarray = field(default=None)
    event: np.ndarray = field(default=None)
    stride_test: int | None = None
    columns: tuple[str, ...] = FEATURE_COLUMNS

    def __post_init__(self):
        self.origins = np.asarray(self.origins, dtype=np.int64)
        n = self.origins.size
        if self.partition is None:
            self.partition = np.full(n, "", dtype=object)
        if self.event is None:
            self.event = np.full(n, "normal", dtype=object)
        self.partition = np.asarray(self.partition, dtype=object)
        self.event = np.asarray(self.event, dtype=object)

    def __len__(self) -> int:
        return int(self.origins.size)

    @property
    def d_in(self) -> int:
        return int(self.values.shape[1])

    def X(self, idx=None) -> np.ndarray:
        o = self.origins if idx is None else self.origins[idx]
        rows = o[:, None] + np.arange(-self.L + 1, 1)[None, :]
        return self.values[rows]

    def Y(self, idx=None) -> np.ndarray:
        o = self.origins if idx is None else self.origins[idx]
        rows = o[:, None] + np.arange(1, self.H + 1)[None, :]
        return self.values[rows, self.target_col]

    def origin_timestamps(self) -> np.ndarray:
        return self.timestamps[self.origins]

    def target_timestamps(self) -> np.ndarray:
        return self.timestamps[self.origins[:, None] + np.arange(1, self.H + 1)[None, :]]

    def select(self, mask) -> "WindowDataset":
        mask = np.asarray(mask)
        return replace(
            self,
            origins=self.origins[mask],
            partition=self.partition[mask],
            event=self.event[mask],
        )

    def subset(self, partition: str) -> "WindowDataset":
        return self.select(self.partition == partition)

    def with_values(self, values: np.ndarray) -> "WindowDataset":
        if values.shape != self.values.shape:
            raise ValueError("replacement values must match the original shape")
        return replace(self, values=values)

    def rows_of(self, partition: str) -> np.ndarray:
        """Boolean mask of matrix rows touched (input or target) by a partition."""
        rows = np.zeros(self.values.shape[0], dtype=bool)
        for o in self.origins[self.partition == partition]:
            rows[o - self.L + 1 : o + self.H + 1] = True
        return rows

    def tag_events(self, events: Sequence[EventLabel]) -> "WindowDataset":
        """Tag each window by the extreme regime covering most of its targets."""
        codes = hourly_event_codes(self.timestamps, events)
        tgt = codes[self.origins[:, None] + np.arange(1, self.H + 1)[None, :]]
        counts = np.stack([(tgt == k).sum(axis=1) for k in range(1, len(EVENT_KINDS))], axis=1)
        tags = np.full(len(self), "normal", dtype=object)
        hit = counts.sum(axis=1) > 0
        best = np.argmax(counts, axis=1) + 1
        tags[hit] = np.asarray(EVENT_KINDS, dtype=object)[best[hit]]
        return replace(self, event=tags)


def make_windows(matrix: FeatureMatrix, L: int, H: int, stride_train: int = 1, stride_test: int | None = None):
    """All gap-free windows at ``stride_train``; the test stride is applied at split time."""
    if L < 1 or H < 1:
        raise ValueError("L and H must be >= 1")
    n = len(matrix)
    if n < L + H:
        raise ValueError(f"matrix of length {n} shorter than L + H = {L + H}")
    if stride_train < 1:
        raise ValueError("stride_train must be >= 1")
    bad = np.concatenate(([0], np.cumsum(~matrix.valid)))
    origins = np.arange(L - 1, n - H, stride_train)
    span_bad = bad[origins + H + 1] - bad[origins - L + 1]
    origins = origins[span_bad == 0]
    return WindowDataset(
        values=matrix.values,
        timestamps=matrix.timestamps,
        origins=origins,
        L=L,
        H=H,
        target_col=list(matrix.columns).index("load"),
        stride_test=stride_test,
        columns=tuple(matrix.columns),
    )


def partition_counts(n: int, fractions: Sequence[float]) -> list[int]:
    """Largest-remainder allocation of ``n`` windows to the four partitions."""
    raw = [f * n for f in fractions]
    counts = [math.floor(r + 1e-9) for r in raw]
    leftover = n - sum(counts)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[:leftover]:
        counts[i] += 1
    return counts


def chronological_split(dataset: WindowDataset, fractions: Sequence[float] = DEFAULT_FRACTIONS):
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != len(PARTITIONS):
        raise ValueError("expected four fractions (train, cal_fit, cal_eval, test)")
    if any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError("fractions must be non-negative and sum to 1")
    order = np.argsort(dataset.origins, kind="stable")
    counts = partition_counts(len(dataset), fractions)
    empty = [p for p, c in zip(PARTITIONS, counts) if c == 0]
    if empty:
        raise ValueError(f"empty partition(s): {', '.join(empty)}")
    tags = np.empty(len(dataset), dtype=object)
    tags[order] = np.repeat(np.asarray(PARTITIONS, dtype=object), counts)
    out = replace(dataset, partition=tags)
    stride = dataset.stride_test
    if stride and stride > 1:
        keep = np.ones(len(out), dtype=bool)
        last = None
        for i in order:
            if tags[i] != "test":
                continue
            o = out.origins[i]
            if last is not None and o - last < stride:
                keep[i] = False
            else:
                last = o
        out = out.select(keep)
    return out


@dataclass
class PreparedData:
    series: LoadSeries
    features: FeatureMatrix  # standardized
    dataset: WindowDataset  # partition- and event-tagged, standardized values
    scaler: Scaler
    events: list[EventLabel]
    outliers: np.ndarray


def prepare(
    series: LoadSeries,
    L: int,
    H: int,
    fractions: Sequence[float] = DEFAULT_FRACTIONS,
    stride_train: int = 1,
    stride_test: int | None = None,
    holidays=None,
    events: Sequence[EventLabel] | None = None,
) -> PreparedData:
    """Clean, featurize, window, split, and standardize with train-only statistics."""
    cleaned, outliers = clean_series(series)
    raw = engineer_features(cleaned, holidays)
    windows = chronological_split(make_windows(raw, L, H, stride_train, stride_test or H), fractions)
    scaler = fit_scaler(raw, windows.rows_of("train"))
    features = apply_scaler(raw, scaler)
    if events is None:
        events = label_extreme_events(cleaned)
    dataset = windows.with_values(features.values).tag_events(events)
    return PreparedData(cleaned, features, dataset, scaler, list(events), outliers)
