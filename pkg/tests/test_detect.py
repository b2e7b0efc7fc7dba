import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from pvregime.deconv import DiffuseFilter
from pvregime.detect import (
    ClassificationError,
    Regime,
    RegimeDecision,
    Thresholds,
    classify,
    estimate_alpha,
    write_decision_log,
)
from pvregime.regimes import make_hmm


@pytest.fixture
def window(clearsky):
    return clearsky.profile(48)[40:56]


def test_unperturbed_window_is_sunny(window, thresholds, hmm5):
    d = classify(window, window, thresholds, hmm5)
    assert d.regime is Regime.SUNNY
    assert d.sse == 0.0


def test_uniform_attenuation_is_overcast(window, thresholds, rng):
    w = 0.4 * window + rng.normal(0, 0.01 * window.max(), window.size)
    d = classify(w, window, thresholds)
    assert d.regime is Regime.OVERCAST
    assert d.alpha_hat == pytest.approx(0.4, abs=0.02)


def test_alternating_window_is_partly_cloudy(window, thresholds, hmm5):
    w = np.where(np.arange(window.size) % 2 == 0, window, 0.2 * window)
    d = classify(w, window, thresholds, hmm5)
    assert d.regime is Regime.PARTLY_CLOUDY
    # best single attenuation still leaves a large residual
    a = estimate_alpha(w, window)
    assert ((w - a * window) ** 2).sum() > window.size * (3 * thresholds.sigma_oc) ** 2
    assert len(d.state_path) == window.size


def test_mild_attenuation_not_overcast(window, thresholds, hmm5):
    d = classify(0.95 * window, window, thresholds, hmm5)
    assert d.regime is not Regime.OVERCAST


def test_partly_cloudy_needs_model(window, thresholds):
    w = np.where(np.arange(window.size) % 2 == 0, window, 0.2 * window)
    with pytest.raises(ValueError):
        classify(w, window, thresholds)


def test_alpha_identities():
    s = np.linspace(100, 2000, 12)
    assert estimate_alpha(0.5 * s, s) == pytest.approx(0.5, abs=1e-15)
    assert estimate_alpha(s, s) == 1.0
    assert estimate_alpha(-s, s) == 0.0
    with pytest.raises(ClassificationError):
        estimate_alpha(s, np.zeros(12))


def test_alpha_monte_carlo(clearsky):
    s = clearsky.profile(48)
    s = s[s > 0]
    s = np.resize(s, 96)
    rng = np.random.default_rng(99)
    for _ in range(200):
        w = 0.3 * s + rng.normal(0, 0.01 * s.max(), s.size)
        assert 0.29 <= estimate_alpha(w, s) <= 0.31


@settings(max_examples=100, deadline=None)
@given(st.integers(2, 40), st.integers(0, 2**31 - 1))
def test_alpha_minimises_sse(n, seed):
    r = np.random.default_rng(seed)
    s = r.uniform(10, 3000, n)
    w = r.uniform(0.1, 1.0) * s + r.normal(0, 50, n)
    a = estimate_alpha(w, s)
    sse = lambda x: ((w - x * s) ** 2).sum()
    if a > 0:
        assert sse(a + 1e-6) >= sse(a) and sse(a - 1e-6) >= sse(a)


@settings(max_examples=60, deadline=None)
@given(
    st.floats(0.05, 20),
    st.sampled_from(["sunny", "overcast", "mixed"]),
    st.integers(0, 2**31 - 1),
)
def test_scale_consistency(c, kind, seed):
    r = np.random.default_rng(seed)
    s = r.uniform(800, 2500, 12)
    if kind == "sunny":
        w = s + r.normal(0, 15, 12)
    elif kind == "overcast":
        w = r.uniform(0.2, 0.8) * s + r.normal(0, 30, 12)
    else:
        w = s * r.choice([0.2, 1.0], 12)
    th = Thresholds(20.0, 40.0)
    hmm = make_hmm(DiffuseFilter(np.array([48.0, 324, 600, 324, 48])), epsilon_s=20.0)
    hmm_c = make_hmm(DiffuseFilter(hmm.filter.taps * c), epsilon_s=20.0 * c)
    a = classify(w, s, th, hmm)
    b = classify(c * w, c * s, th.scaled(c), hmm_c)
    assert a.regime is b.regime
    assert b.alpha_hat == pytest.approx(a.alpha_hat, rel=1e-9)
    if a.state_path is not None:
        np.testing.assert_array_equal(a.state_path.states, b.state_path.states)


def test_low_pattern_samples_excluded(thresholds):
    s = np.array([0.0, 0.5, 1000.0, 1200.0])
    d = classify(np.array([50.0, 9.0, 1000.0, 1200.0]), s, thresholds)
    assert d.regime is Regime.SUNNY
    assert d.used.tolist() == [False, False, True, True]
    with pytest.raises(ClassificationError):
        classify(np.ones(3), np.zeros(3), thresholds)
    with pytest.raises(ClassificationError):
        classify(np.ones(1), np.ones(1), thresholds)


def test_decision_invariants():
    with pytest.raises(ValueError):
        RegimeDecision(Regime.OVERCAST, 1.2, 0.0)
    with pytest.raises(ValueError):
        RegimeDecision(Regime.PARTLY_CLOUDY, 0.5, 0.0)
    with pytest.raises(ValueError):
        Thresholds(20, 40, mu=1.0)


def test_regime_parse():
    for r in Regime:
        assert Regime.parse(r.label) is r
    with pytest.raises(ValueError):
        Regime.parse("foggy")


def test_decision_log(tmp_path, window, thresholds):
    d = classify(0.5 * window, window, thresholds)
    out = tmp_path / "log.jsonl"
    write_decision_log([d.to_record(3, -4, 11)], out)
    (rec,) = [json.loads(x) for x in out.read_text().splitlines()]
    assert rec == {"day": 3, "k1": -4, "k2": 11, "regime": "Overcast", "alpha": 0.5, "sse": pytest.approx(0.0, abs=1e-6)}
