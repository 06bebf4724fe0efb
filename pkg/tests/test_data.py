import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from btload import data as D


def flat_series(n, load=100.0, temp=20.0, start="2020-01-06T00"):
    ts = np.datetime64(start, "h") + np.arange(n) * D.HOUR
    full = lambda v: np.full(n, v, dtype=float)
    return D.LoadSeries(ts, full(load), full(temp), full(50.0), full(3.0), full(0.0), renew_share=full(0.1))


def write(tmp_path, text, name="in.csv"):
    p = tmp_path / name
    p.write_text(text)
    return p


HEADER = ",".join(D.CSV_COLUMNS) + "\n"


# -- generator -----------------------------------------------------------


def test_generator_is_deterministic():
    cfg = D.SynthConfig(hours=2000, seed=11)
    a, b = D.generate_synthetic(cfg), D.generate_synthetic(cfg)
    for name, arr in a.channels().items():
        assert np.array_equal(arr, b.channels()[name]), name


def test_generator_rejects_short_series():
    with pytest.raises(ValueError):
        D.generate_synthetic(D.SynthConfig(hours=10))


def test_generator_without_events_has_no_labels():
    s = D.generate_synthetic(D.SynthConfig(hours=24 * 365 * 2, seed=3, event_count=0))
    assert D.label_extreme_events(s) == []


def test_injected_events_are_labeled():
    s = D.generate_synthetic(D.SynthConfig(hours=24 * 365 * 2, seed=3, event_count=4))
    events = D.label_extreme_events(s)
    kinds = {e.kind for e in events}
    assert kinds == {"heatwave", "cold_snap"}
    assert all(e.hours >= 72 for e in events)


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_lag24_autocorrelation(seed):
    load = D.generate_synthetic(D.SynthConfig(hours=10_000, seed=seed)).load
    x = load - load.mean()
    acf24 = np.dot(x[:-24], x[24:]) / np.dot(x, x)
    assert acf24 > 0.8


@pytest.mark.parametrize("seed", [0, 4])
def test_temperature_demand_minimum_in_comfort_band(seed):
    s = D.generate_synthetic(D.SynthConfig(hours=8760, seed=seed))
    edges = np.arange(-10, 40, 1.0)
    idx = np.digitize(s.temperature, edges)
    means = {edges[i - 1]: s.load[idx == i].mean() for i in np.unique(idx) if (idx == i).sum() >= 50}
    t_min = min(means, key=means.get)
    assert 14.0 <= t_min <= 19.0


# -- CSV -------------------------------------------------------------------


def test_ingest_three_rows(tmp_path):
    body = "".join(f"2021-03-01T0{h}:00:00Z,100,5,50,3,0,0.2\n" for h in range(3))
    s = D.ingest_csv(write(tmp_path, HEADER + body))
    assert len(s) == 3 and s.valid.all()


def test_ingest_non_monotone_names_row_2(tmp_path):
    body = "2021-03-01T05:00:00Z,100,5,50,3,0,0.2\n2021-03-01T04:00:00Z,100,5,50,3,0,0.2\n"
    with pytest.raises(D.DataFormatError, match="row 2"):
        D.ingest_csv(write(tmp_path, HEADER + body))


def test_ingest_marks_missing_hour_as_gap(tmp_path):
    body = "".join(f"2021-03-01T0{h}:00:00Z,100,5,50,3,0,0.2\n" for h in (4, 6))
    s = D.ingest_csv(write(tmp_path, HEADER + body))
    assert len(s) == 3
    assert s.gap_runs() == [(1, 2)]


def test_ingest_errors(tmp_path):
    with pytest.raises(D.DataFormatError, match="missing required column"):
        D.ingest_csv(write(tmp_path, "timestamp,load_mw\n2021-01-01T00:00:00Z,1\n"))
    dup = "2021-03-01T05:00:00Z,100,5,50,3,0,0.2\n" * 2
    with pytest.raises(D.DataFormatError, match="duplicate"):
        D.ingest_csv(write(tmp_path, HEADER + dup))
    bad = "2021-03-01T05:00:00Z,abc,5,50,3,0,0.2\n"
    with pytest.raises(D.DataFormatError, match="line 2"):
        D.ingest_csv(write(tmp_path, HEADER + bad))


def test_csv_round_trip(tmp_path):
    s = D.generate_synthetic(D.SynthConfig(hours=400, seed=5))
    p = tmp_path / "s.csv"
    D.write_csv(s, p)
    back = D.ingest_csv(p)
    for name, arr in s.channels().items():
        assert np.array_equal(arr, back.channels()[name]), name


# -- cleaning --------------------------------------------------------------


def test_spike_flagged_and_interpolated():
    s = flat_series(400)
    s.load[200] = 1000.0
    cleaned, out = D.clean_series(s)
    assert out[200] and out.sum() == 1
    assert cleaned.load[200] == pytest.approx(100.0)


def test_long_gap_stays_missing():
    s = flat_series(400)
    s.load[100:107] = np.nan
    cleaned, _ = D.clean_series(D.LoadSeries(**{**s.__dict__, "valid": None}))
    assert np.isnan(cleaned.load[100:107]).all()
    assert not cleaned.valid[100:107].any()


def test_short_gap_linear_fill():
    s = flat_series(400)
    s.load[:] = 100.0
    s.load[201:] = 130.0
    s.load[199] = 100.0
    s.load[200:202] = np.nan
    s.load[202] = 130.0
    cleaned, _ = D.clean_series(D.LoadSeries(**{**s.__dict__, "valid": None}))
    assert cleaned.load[200:202] == pytest.approx([110.0, 120.0])


# -- features --------------------------------------------------------------


def test_calendar_encoding():
    s = flat_series(48, start="2021-01-04T00")
    fm = D.engineer_features(s)
    hs, hc = fm.column("hour_sin"), fm.column("hour_cos")
    assert (hs[0], hc[0]) == (0.0, 1.0)
    assert hs[6] == pytest.approx(1.0, abs=1e-15) and hc[6] == pytest.approx(0.0, abs=1e-15)
    assert np.allclose(hs**2 + hc**2, 1.0, atol=1e-9)
    ds, dc = fm.column("dow_sin"), fm.column("dow_cos")
    assert np.allclose(ds**2 + dc**2, 1.0, atol=1e-9)
    hours = np.round(np.mod(np.arctan2(hs, hc), 2 * np.pi) * 24 / (2 * np.pi)).astype(int) % 24
    assert np.array_equal(hours[:24], np.arange(24))


def test_heat_index_passthrough_and_reference():
    assert D.heat_index(20.0, 90.0) == 20.0
    # NWS table: 90 F at 60% RH -> 100 F
    hi_f = D.heat_index((90 - 32) * 5 / 9, 60.0) * 9 / 5 + 32
    assert hi_f == pytest.approx(100.0, abs=1.0)


def test_wind_chill_reference():
    assert D.wind_chill(15.0, 10.0) == 15.0
    assert D.wind_chill(-5.0, 1.0) == -5.0  # below the 4.8 km/h threshold
    # Environment Canada table: -10 C, 20 km/h -> -17.9 C
    assert D.wind_chill(-10.0, 20 / 3.6) == pytest.approx(-17.9, abs=0.1)


def test_scaler_population_std():
    s = flat_series(3)
    s.load[:] = [1.0, 2.0, 3.0]
    fm = D.engineer_features(s)
    sc = D.fit_scaler(fm, np.ones(3, dtype=bool))
    z = D.apply_scaler(fm, sc).column("load")
    assert z == pytest.approx([-1.224744871391589, 0.0, 1.224744871391589], abs=1e-12)
    # temperature is constant: flagged and left as is
    j = fm.columns.index("temperature")
    assert sc.constant[j] and D.apply_scaler(fm, sc).column("temperature")[0] == 20.0


def test_scaler_requires_rows():
    fm = D.engineer_features(flat_series(3))
    with pytest.raises(ValueError):
        D.fit_scaler(fm, np.zeros(3, dtype=bool))


def test_scaler_uses_train_rows_only():
    prep = D.prepare(D.generate_synthetic(D.SynthConfig(hours=3000, seed=1)), 168, 24)
    rows = prep.dataset.rows_of("train") & prep.features.valid
    tr = prep.features.values[rows]
    j = prep.features.columns.index("load")
    assert abs(tr[:, j].mean()) < 1e-9 and abs(tr[:, j].std() - 1.0) < 1e-9
    test_rows = prep.dataset.rows_of("test") & ~prep.dataset.rows_of("train")
    assert abs(prep.features.values[test_rows, j].mean()) > 1e-3
    assert prep.scaler.mean[j] == pytest.approx(prep.series.load[rows].mean(), rel=1e-12)


# -- events ----------------------------------------------------------------


def _series_with_hot_days(n_hot):
    # two years, so each calendar month pools ~60 days and can hold 3 exceedances
    days = 730
    s = flat_series(24 * days, temp=10.0, start="2021-01-01T00")
    s.temperature[24 * 10 : 24 * (10 + n_hot)] += 15.0
    return s


def test_three_hot_days_make_one_heatwave():
    ev = D.label_extreme_events(_series_with_hot_days(3))
    assert [(e.kind, e.hours) for e in ev] == [("heatwave", 72)]


def test_two_hot_days_make_nothing():
    assert D.label_extreme_events(_series_with_hot_days(2)) == []


def test_constant_temperature_has_no_events():
    assert D.label_extreme_events(flat_series(24 * 40)) == []


def test_labeling_idempotent(tmp_path):
    s = D.generate_synthetic(D.SynthConfig(hours=24 * 365 * 2, seed=8, event_count=3))
    ev = D.label_extreme_events(s)
    assert D.label_extreme_events(s) == ev
    D.save_events(ev, tmp_path / "ev.json")
    assert D.load_events(tmp_path / "ev.json") == ev


# -- windows and splits ----------------------------------------------------


def test_window_counts():
    fm = D.engineer_features(flat_series(200))
    assert len(D.make_windows(fm, 168, 24)) == 9
    assert len(D.make_windows(D.engineer_features(flat_series(192)), 168, 24)) == 1
    with pytest.raises(ValueError):
        D.make_windows(D.engineer_features(flat_series(100)), 168, 24)


def test_windows_skip_gaps():
    s = flat_series(400)
    s.load[100] = np.nan
    fm = D.engineer_features(D.LoadSeries(**{**s.__dict__, "valid": None}))
    w = D.make_windows(fm, 168, 24)
    lo, hi = w.origins - 167, w.origins + 24
    assert not np.any((lo <= 100) & (100 <= hi))
    assert np.isfinite(w.X()).all() and np.isfinite(w.Y()).all()


def test_window_targets_follow_inputs():
    s = flat_series(300)
    s.load[:] = np.arange(300.0)
    w = D.make_windows(D.engineer_features(s), 168, 24)
    X, Y = w.X(), w.Y()
    assert np.array_equal(Y[:, 0], X[:, -1, 0] + 1)
    assert np.all(np.diff(Y, axis=1) == 1)


def test_split_counts_for_100():
    assert D.partition_counts(100, D.DEFAULT_FRACTIONS) == [67, 6, 5, 22]


def test_split_rejects_empty_partitions():
    w = D.make_windows(D.engineer_features(flat_series(300)), 168, 24)
    with pytest.raises(ValueError, match="empty"):
        D.chronological_split(w, (1, 0, 0, 0))
    with pytest.raises(ValueError):
        D.chronological_split(w, (0.5, 0.5, 0.5, 0.5))


@settings(max_examples=30, deadline=None)
@given(st.integers(min_value=20, max_value=3000))
def test_partition_counts_properties(n):
    counts = D.partition_counts(n, D.DEFAULT_FRACTIONS)
    assert sum(counts) == n
    for c, f in zip(counts, D.DEFAULT_FRACTIONS):
        assert math.floor(f * n) <= c <= math.ceil(f * n)


def test_split_is_chronological_and_test_is_thinned():
    prep = D.prepare(D.generate_synthetic(D.SynthConfig(hours=3000, seed=2)), 168, 24)
    ds = prep.dataset
    o = {p: ds.origins[ds.partition == p] for p in D.PARTITIONS}
    assert o["train"].max() < o["cal_fit"].min()
    assert o["cal_fit"].max() < o["cal_eval"].min()
    assert o["cal_eval"].max() < o["test"].min()
    assert np.all(np.diff(np.sort(o["test"])) >= 24)
