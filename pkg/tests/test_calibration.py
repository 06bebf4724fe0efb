import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import norm

from btload import calibration as cal
from btload.isotonic import pava
from btload.metrics import picp
from btload.model import DEFAULT_LEVELS

LV = np.array(DEFAULT_LEVELS)


def test_pava_hand_case():
    np.testing.assert_allclose(pava([0.2, 0.15, 0.85]), [0.175, 0.175, 0.85], atol=1e-15)


def test_fit_pools_violating_coverages():
    # 20 instances whose raw coverages at (0.1, 0.5, 0.9) are (0.2, 0.15, 0.85)
    y = np.arange(20.0)[:, None]
    q = np.array([[3.5, 2.5, 16.5]]).repeat(20, axis=0)[:, None, :]
    m = cal.fit_isotonic(q, y, (0.1, 0.5, 0.9), ["cal_fit"] * 20)
    assert m.meta["raw_coverage"] == pytest.approx([0.2, 0.15, 0.85])
    assert m.coverage == pytest.approx((0.175, 0.175, 0.85))
    assert all(b >= a for a, b in zip(m.calibrated, m.calibrated[1:]))


def test_perfectly_calibrated_gives_identity():
    y = np.arange(10.0)[:, None]
    q = np.array([[0.5, 4.5, 8.5]]).repeat(10, axis=0)[:, None, :]
    m = cal.fit_isotonic(q, y, (0.1, 0.5, 0.9), ["cal_fit"] * 10)
    assert m.calibrated == pytest.approx((0.1, 0.5, 0.9), abs=1e-15)


def test_degenerate_cal_fit_warns():
    with pytest.warns(UserWarning):
        m = cal.fit_isotonic(np.zeros((5, 2, 7)), np.ones((5, 2)), DEFAULT_LEVELS, ["cal_fit"] * 5)
    assert m.calibrated == tuple(DEFAULT_LEVELS)


@pytest.mark.parametrize("bad", [None, ["cal_fit", "cal_eval"], ["test"], ["train", "cal_fit"]])
def test_leakage_assertion(bad):
    with pytest.raises(cal.LeakageError):
        cal.fit_isotonic(np.zeros((2, 1, 7)), np.arange(2.0)[:, None], DEFAULT_LEVELS, bad)
    with pytest.raises(cal.LeakageError):
        cal.fit_conformal(np.zeros((2, 1, 7)), np.arange(2.0)[:, None], DEFAULT_LEVELS, bad)


def test_identity_map_is_passthrough():
    q = np.sort(np.random.default_rng(0).standard_normal((4, 3, 7)), axis=-1)
    out = cal.calibrate_quantiles(cal.CalibrationMap.identity(DEFAULT_LEVELS), q, DEFAULT_LEVELS)
    assert np.array_equal(out, q)


def test_shifting_up_raises_quantile():
    q = np.sort(np.random.default_rng(1).standard_normal((50, 7)), axis=-1)
    shifted = list(DEFAULT_LEVELS)
    shifted[-1] = 0.975
    m = cal.CalibrationMap(tuple(DEFAULT_LEVELS), tuple(shifted))
    out = cal.calibrate_quantiles(m, q, DEFAULT_LEVELS)
    assert np.all(out[:, -1] >= q[:, -1])
    assert np.all(np.diff(out, axis=-1) >= 0)


def test_map_rejects_levels_outside_clamp():
    m = cal.CalibrationMap.identity(DEFAULT_LEVELS)
    with pytest.raises(ValueError):
        m(0.0005)


def test_quantile_at_gaussian_tails():
    # probit-linear tails are exact for a Gaussian quantile vector
    q = norm.ppf(LV) * 2 + 1
    np.testing.assert_allclose(cal.quantile_at(q, LV, [0.01, 0.99]), norm.ppf([0.01, 0.99]) * 2 + 1, rtol=1e-12)


@settings(max_examples=60, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=7, max_size=7))
def test_map_monotone_for_any_coverage(raw):
    curve = pava(np.array(raw))
    calib = [cal.invert_coverage(LV, curve, a) for a in LV]
    calib = np.maximum.accumulate(calib)
    m = cal.CalibrationMap(tuple(DEFAULT_LEVELS), tuple(calib.tolist()))
    grid = np.linspace(0.01, 0.99, 99)
    assert np.all(np.diff(m(grid)) >= 0)
    assert np.all((calib >= 1e-3) & (calib <= 1 - 1e-3))


def _overconfident(n, rng):
    y = rng.standard_normal((n, 1))
    q = np.broadcast_to(0.5 * norm.ppf(LV), (n, 1, 7))
    return q, y


def _coverage_error(q, y):
    return np.mean([abs(np.mean(y <= q[..., k]) - a) for k, a in enumerate(LV)])


def test_isotonic_improves_held_out_coverage():
    rng = np.random.default_rng(2)
    qf, yf = _overconfident(2000, rng)
    qe, ye = _overconfident(2000, rng)
    m = cal.fit_isotonic(qf, yf, DEFAULT_LEVELS, ["cal_fit"] * 2000)
    after = cal.calibrate_quantiles(m, qe, DEFAULT_LEVELS)
    assert _coverage_error(after, ye) < _coverage_error(qe, ye)
    assert picp(after[..., 0], after[..., -1], ye) > picp(qe[..., 0], qe[..., -1], ye)


def test_calibration_map_round_trip(tmp_path):
    m = cal.CalibrationMap(tuple(DEFAULT_LEVELS), (0.01, 0.05, 0.2, 0.5, 0.8, 0.95, 0.99), meta={"k": 1})
    m.save(tmp_path / "c.json")
    assert cal.CalibrationMap.load(tmp_path / "c.json") == m


# -- conformal -----------------------------------------------------------


def test_conformal_rank_n99():
    assert cal.conformal_rank(99, 0.1) == 90
    scores = np.random.default_rng(3).permutation(99).astype(float)
    off = cal.conformal_offset(np.zeros(99), np.zeros(99), scores, 0.1)
    # score = max(0 - y, y - 0) = y for y >= 0: 90th order statistic = 10th largest
    assert off == sorted(scores)[89] == sorted(scores, reverse=True)[9]


def test_conformal_too_few_points():
    with pytest.raises(ValueError):
        cal.conformal_rank(5, 0.1)


def test_zero_residuals_zero_offset():
    q = np.broadcast_to(np.arange(7.0), (30, 1, 7)).copy()
    y = np.full((30, 1), 3.0)
    q[..., :] = 3.0
    off = cal.fit_conformal(q, y, DEFAULT_LEVELS, ["cal_fit"] * 30)
    assert off.offsets == {"80": 0.0, "90": 0.0}
    assert np.array_equal(off.apply_quantiles(q, DEFAULT_LEVELS), q)


def test_conformal_coverage_over_seeds():
    n = 200
    cover = []
    for seed in range(50):
        rng = np.random.default_rng(seed)
        qf, yf = _overconfident(n, rng)
        qe, ye = _overconfident(n, rng)
        off = cal.fit_conformal(qf, yf, DEFAULT_LEVELS, ["cal_fit"] * n)
        lo, hi = off.apply(qe[..., 0], qe[..., -1], "90")
        cover.append(picp(lo, hi, ye))
    assert np.mean(cover) >= 0.90 - 2 / np.sqrt(n)


def test_conformal_round_trip():
    off = cal.ConformalOffsets({"80": 0.1, "90": 0.25}, 40)
    assert cal.ConformalOffsets.from_dict(off.to_dict()) == off
