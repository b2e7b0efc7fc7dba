import csv
import json
import math

import numpy as np
import pytest
from scipy import stats

from pvregime.distributions import Degenerate, Gaussian, TruncatedGaussian
from pvregime.forecast import ForecastTable
from pvregime.metrics import (
    NonMonotoneCdfError,
    crps,
    diurnal_profile,
    evaluate_all,
    forecast_skill,
    interval_score,
    mape,
    nmse,
    reliability,
    rmse,
    score_table,
    write_report,
)
from pvregime.timeseries import PowerSeries


def test_mape_examples():
    w = np.array([500.0, 1000.0, 2000.0])
    assert mape(w, w)[0] == 0.0
    assert mape(w, 1.1 * w)[0] == pytest.approx(0.1)
    assert mape([100.0, 200.0], [90.0, 220.0])[0] == pytest.approx(0.1)


def test_mape_excludes_dim_samples():
    val, excluded = mape([10.0, 1000.0], [0.0, 900.0])
    assert excluded == 1 and val == pytest.approx(0.1)
    val, excluded = mape([0.0, 1.0], [5.0, 5.0])
    assert math.isnan(val) and excluded == 2


def test_rmse_examples():
    w = np.linspace(0, 100, 7)
    assert rmse(w, w) == 0.0
    assert rmse(w, w + 7.0) == pytest.approx(7.0)
    assert rmse([0.0, 0.0], [3.0, 4.0]) == pytest.approx(math.sqrt(12.5))
    with pytest.raises(ValueError):
        rmse([np.nan], [1.0])


def test_nmse():
    assert nmse([1.0, 1.0], [1.0, 0.0]) == 0.5
    assert nmse([0.0], [1.0]) == 0.0


def test_crps_degenerate():
    assert crps(500.0, Degenerate(500.0)) == 0.0
    assert crps(500.0, Degenerate(460.0)) == 40.0


def test_crps_gaussian_closed_form():
    sig = 25.0
    assert crps(800.0, Gaussian(800.0, sig)) == pytest.approx(sig * (2 * stats.norm.pdf(0) - 1 / math.sqrt(math.pi)))


def test_crps_callable_matches_closed_form():
    d = TruncatedGaussian(700.0, 80.0, 0.0, 1000.0)
    for y in (300.0, 650.0, 990.0):
        assert crps(y, d.cdf, upper=1500.0) == pytest.approx(d.crps(y), abs=1e-3)
    step = lambda x: float(x >= 460.0)
    assert crps(500.0, step, upper=3740.0) == pytest.approx(40.0, abs=1e-3)


def test_crps_rejects_bad_cdf():
    with pytest.raises(NonMonotoneCdfError):
        crps(10.0, lambda x: 1.0 - stats.norm.cdf(x, 10, 3), upper=50.0)


def test_reliability_examples():
    w = np.array([1.0, 2.0, 3.0])
    assert reliability(w, w - 1, w + 1, 0.1) == (1.0, pytest.approx(0.1))
    rng = np.random.default_rng(0)
    y = rng.normal(size=100)
    assert reliability(y, np.zeros(100) + 0.5, np.zeros(100) + 0.5, 0.1)[0] == 0.0


def test_reliability_self_consistent():
    rng = np.random.default_rng(11)
    mus = rng.uniform(200, 3000, 10_000)
    dists = [TruncatedGaussian(m, 150.0, 0.0, 3740.0) for m in mus]
    obs = np.array([float(d.sample(rng, 1)[0]) for d in dists])
    bounds = np.array([d.interval(0.1, anchor=d.ppf(0.5)) for d in dists])
    R, _ = reliability(obs, bounds[:, 0], bounds[:, 1], 0.1)
    assert 0.88 <= R <= 0.92


def test_interval_score_cases():
    assert interval_score(5.0, 0.0, 10.0, 0.2) == pytest.approx(-4.0)
    assert interval_score(11.0, 0.0, 10.0, 0.2) == pytest.approx(-8.0)
    assert interval_score(-2.0, 0.0, 10.0, 0.2) == pytest.approx(-12.0)
    assert interval_score(3.0, 3.0, 3.0, 0.5) == 0.0
    with pytest.raises(ValueError):
        interval_score(1.0, 2.0, 1.0, 0.1)
    np.testing.assert_allclose(interval_score(np.array([5.0, 11.0]), 0.0, 10.0, 0.2), [-4.0, -8.0])


def test_skill_examples():
    assert forecast_skill(10.0, 10.0) == 0.0
    assert forecast_skill(5.0, 10.0) == 0.5
    assert math.isnan(forecast_skill(5.0, 0.0))


def test_diurnal_profile_shapes():
    minutes = np.repeat(np.arange(6, 18) * 60, 4)
    w = np.full(minutes.size, 1000.0)
    flat = diurnal_profile(w, 1.1 * w, minutes)
    assert np.allclose(list(flat.values()), 0.1)
    f = w.copy()
    f[minutes // 60 == 12] = 700.0
    prof = diurnal_profile(w, f, minutes)
    assert max(prof, key=prof.get) == 12
    assert all(prof[h] < prof[12] for h in prof if h != 12)
    assert len(diurnal_profile(w[:4], f[:4], minutes[:4])) == 1


def _table():
    values = np.zeros((1, 96))
    values[0, 48:60] = np.arange(12) * 100.0 + 500.0
    series = PowerSeries.from_values(values)
    t = ForecastTable()
    for origin in range(0, 3):
        for step in (1, 2):
            k = origin + step
            obs = values[0, k + 48]
            t.add("a", 0, origin, k, step, "Sunny", obs, Gaussian(obs, 10.0))
            t.add("b", 0, origin, k, step, "Sunny", obs + 50.0 * step, Gaussian(obs + 50.0 * step, 10.0))
    return t, series


def test_score_table_and_skill():
    t, series = _table()
    scores = evaluate_all(t, series, reference="b")
    a, b = scores["a"], scores["b"]
    np.testing.assert_array_equal(a.rmse, 0.0)
    np.testing.assert_allclose(b.rmse, [50.0, 100.0])
    np.testing.assert_array_equal(a.skill, 1.0)
    np.testing.assert_array_equal(b.skill, 0.0)
    assert a.n.tolist() == [3, 3]
    assert a.r_avg(0.1) == 1.0
    assert a.score_avg(0.5) == pytest.approx(-2 * 0.5 * 2 * stats.norm.ppf(0.75) * 10.0)
    with pytest.raises(ValueError):
        score_table(t, series)


def test_write_report_round_trip(tmp_path):
    t, series = _table()
    scores = evaluate_all(t, series, reference="b")
    write_report(scores, tmp_path)
    rows = list(csv.DictReader((tmp_path / "metrics.csv").open()))
    assert [(r["method"], r["k_tau"]) for r in rows] == [("a", "1"), ("a", "2"), ("b", "1"), ("b", "2")]
    assert float(rows[3]["rmse_w"]) == pytest.approx(100.0)
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert summary["b"]["rmse"] == pytest.approx([50.0, 100.0])
    assert summary["a"]["skill"] == [1.0, 1.0]
