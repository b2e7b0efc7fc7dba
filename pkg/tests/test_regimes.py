import itertools
import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.integrate import quad

from pvregime import synth
from pvregime.deconv import DiffuseFilter, hamming_init
from pvregime.regimes import (
    DecodeError,
    EstimationError,
    OvercastRegime,
    PartlyCloudyHmm,
    ShortWindowWarning,
    SunnyRegime,
    default_transition,
    emission_logpdf,
    emission_matrix,
    enumerate_states,
    estimate_sigmas,
    make_hmm,
    n_states,
    overcast_logpdf,
    path_loglik,
    structural_mask,
    train_segmental_kmeans,
    viterbi,
    viterbi_decode,
)


def brute_force(log_pi, log_A, log_B):
    """Lexicographically first optimal path by enumeration."""
    T, ns = log_B.shape
    paths = np.array(list(itertools.product(range(ns), repeat=T)))
    with np.errstate(invalid="ignore"):
        v = log_pi[paths[:, 0]] + log_B[0, paths[:, 0]]
        for t in range(1, T):
            v = v + log_A[paths[:, t - 1], paths[:, t]] + log_B[t, paths[:, t]]
    best = v.max()
    if not np.isfinite(best):
        return None, best
    return paths[np.flatnonzero(v >= best - 1e-10 * max(1.0, abs(best)))[0]], best


# ------------------------------------------------------------------ state space


def test_state_counts():
    assert n_states(5, 1) == 8
    assert n_states(5, 2) == 18
    phi, labels = enumerate_states(2, 1)
    assert phi.shape == (4, 5)
    assert len({tuple(c) for c in phi.T}) == 5
    assert labels[0] == "E" and labels[-2:] == ["B", "Ed"]


@pytest.mark.parametrize("M", range(2, 9))
@pytest.mark.parametrize("ell", [1, 2, 3])
def test_enumeration_matches_closed_form(M, ell):
    if ell >= M:
        with pytest.raises(ValueError):
            enumerate_states(M, ell)
        return
    phi, _ = enumerate_states(M, ell)
    assert phi.shape == (M + 2, n_states(M, ell))
    assert phi.shape[1] == sum(math.comb(M, j) for j in range(ell + 1)) + 2
    assert len({tuple(c) for c in phi.T}) == phi.shape[1]
    assert np.all(phi[:M].sum(axis=0)[1:-2] <= ell)


@pytest.mark.parametrize("M", [2, 3, 5, 7])
def test_mask_free_entries(M):
    mask = structural_mask(M, 1)
    # shifts are forced, hub rows carry three entries each
    free = sum(max(int(r.sum()) - 1, 0) for r in mask)
    assert mask.sum() == (M - 1) + 12
    assert free == 8
    for j in range(1, M):
        assert mask[j].sum() == 1 and mask[j, j + 1]


def test_ell_must_be_below_m():
    with pytest.raises(ValueError):
        structural_mask(5, 5)


def test_hmm_validation(hmm5):
    A = np.array(hmm5.transition)
    bad = A.copy()
    bad[1, 0] = 0.5
    bad[1, 2] = 0.5
    with pytest.raises(ValueError):
        hmm5.with_transition(bad)
    with pytest.raises(ValueError):
        PartlyCloudyHmm(hmm5.filter, A, rates=(4, 2, 8))
    with pytest.raises(ValueError):
        hmm5.with_transition(A * 0.9)
    back = PartlyCloudyHmm.from_dict(hmm5.to_dict())
    np.testing.assert_array_equal(back.transition, hmm5.transition)
    assert back.sigma_oc == hmm5.sigma_oc


# ------------------------------------------------------------------ emissions


def test_edge_state_at_pattern(hmm5):
    s = 1500.0
    assert emission_logpdf(hmm5, hmm5.Ed, s, s) == pytest.approx(math.log(8 / s))


def test_band_state(hmm5):
    assert np.isfinite(emission_logpdf(hmm5, 0, 1000.0, 1000.0))
    assert emission_logpdf(hmm5, 0, 1000.0 - 3 * hmm5.epsilon_s, 1000.0) == -np.inf


def test_support_violations_are_minus_inf(hmm5):
    for i in range(1, hmm5.Ed):
        assert emission_logpdf(hmm5, i, 1100.0, 1000.0) == -np.inf
        assert emission_logpdf(hmm5, i, -1.0, 1000.0) == -np.inf
    assert emission_logpdf(hmm5, hmm5.Ed, 999.0, 1000.0) == -np.inf


def _integral(hmm, i, s):
    f = lambda w: math.exp(float(emission_logpdf(hmm, i, w, s)))
    if i == hmm.E:
        return quad(f, s - hmm.epsilon_s, s + hmm.epsilon_s, epsabs=1e-13, epsrel=1e-13)[0]
    if i == hmm.Ed:
        return quad(f, s, math.inf, epsabs=1e-13, epsrel=1e-13, limit=200)[0]
    return quad(f, 0, s, epsabs=1e-13, epsrel=1e-13, limit=200, points=[s * 0.99, s * 0.9, s * 0.5])[0]


def test_lag_state_integrates_to_one(hmm5):
    assert _integral(hmm5, 1, 2000.0) == pytest.approx(1.0, abs=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.floats(50, 3500), st.floats(0.5, 3), st.floats(1, 2), st.floats(1, 2), st.integers(0, 2**31 - 1))
def test_every_emission_normalised(s, lz, fb, fe, seed):
    r = np.random.default_rng(seed)
    filt = DiffuseFilter(r.uniform(0.05, 1.0, 4) * s / 4)
    hmm = make_hmm(filt, rates=(lz, lz * fb, lz * fb * fe), epsilon_s=r.uniform(1, 30))
    for i in range(hmm.n_states):
        assert _integral(hmm, i, s) == pytest.approx(1.0, abs=1e-8)


def test_overcast_density():
    reg = OvercastRegime(0.6, 50.0)
    s = 1000.0
    total = quad(lambda w: math.exp(float(overcast_logpdf(reg, w, s))), 0, s, points=[600.0], epsabs=1e-13)[0]
    assert total == pytest.approx(1.0, abs=1e-8)
    grid = np.linspace(1, 999, 999)
    assert grid[np.argmax(overcast_logpdf(reg, grid, s))] == pytest.approx(600.0, abs=1.0)
    wide = OvercastRegime(0.5, 1e6)
    np.testing.assert_allclose(np.exp(overcast_logpdf(wide, grid, s)), 1 / s, rtol=1e-6)
    assert overcast_logpdf(reg, 1001.0, s) == -np.inf


def test_sunny_logpdf():
    assert SunnyRegime(10.0).logpdf(5.0, 5.0) == pytest.approx(-math.log(10.0) - 0.5 * math.log(2 * math.pi))


def test_estimate_sigmas():
    assert estimate_sigmas(np.zeros(20), np.zeros(20)) == (3.74, 3.74)
    alt = np.tile([7.0, -7.0], 10)
    assert estimate_sigmas(alt, alt)[0] == pytest.approx(7.0)
    rng = np.random.default_rng(0)
    sd = estimate_sigmas(rng.normal(0, 100, 10_000), rng.normal(0, 100, 10_000))[0]
    assert 97 <= sd <= 103
    with pytest.raises(EstimationError):
        estimate_sigmas(np.zeros(3), np.zeros(30))


# ------------------------------------------------------------------ decoding


def test_toy_decode_matches_enumeration():
    r = np.random.default_rng(1)
    log_pi = np.log(r.dirichlet(np.ones(3)))
    log_A = np.log(r.dirichlet(np.ones(3), 3))
    log_B = r.normal(size=(4, 3))
    path = viterbi(log_pi, log_A, log_B)
    ref, best = brute_force(log_pi, log_A, log_B)
    np.testing.assert_array_equal(path.states, ref)
    assert path.loglik == pytest.approx(best, abs=1e-9)


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 5), st.integers(1, 5), st.integers(0, 2**31 - 1))
def test_decode_property(ns, T, seed):
    r = np.random.default_rng(seed)
    A = r.dirichlet(np.ones(ns), ns) * (r.uniform(size=(ns, ns)) > 0.3)
    A[np.arange(ns), r.integers(ns, size=ns)] += 0.1
    with np.errstate(divide="ignore"):
        log_A = np.log(A / A.sum(axis=1, keepdims=True))
    log_pi = np.log(r.dirichlet(np.ones(ns)))
    log_B = r.normal(size=(T, ns))
    ref, best = brute_force(log_pi, log_A, log_B)
    if not np.isfinite(best):
        with pytest.raises(DecodeError):
            viterbi(log_pi, log_A, log_B)
        return
    path = viterbi(log_pi, log_A, log_B)
    np.testing.assert_array_equal(path.states, ref)
    assert path.loglik == pytest.approx(best, abs=1e-9)


def _tight(hmm):
    # band at the noise level of a clean sensor, so an exact match favours E
    return make_hmm(hmm.filter, transition=hmm.transition, epsilon_s=2.0)


def test_flat_window_decodes_to_clear(hmm5):
    s = np.full(6, 1500.0)
    assert viterbi_decode(_tight(hmm5), s, s).states.tolist() == [0] * 6


def test_deep_drop_visits_attenuation(hmm5):
    hmm5 = _tight(hmm5)
    s = np.full(9, 2000.0)
    w = s.copy()
    w[3:8] = s[3:8] - np.array([48, 324, 600, 324, 48]) * 2.0
    path = viterbi_decode(hmm5, w, s).states
    assert all(hmm5.is_diffuse(int(i)) or i == hmm5.B for i in path[3:7])
    assert path[0] == 0 and path[1] == 0


def test_undecodable_sample():
    hmm = make_hmm(hamming_init(3, 100.0), epsilon_s=5.0)
    with pytest.raises(DecodeError) as info:
        viterbi_decode(hmm, np.array([100.0, np.nan]), np.array([100.0, 100.0]))
    assert info.value.sample == 1


def test_path_loglik_consistent(hmm5):
    rng = np.random.default_rng(2)
    s = np.full(12, 1800.0)
    st_ = synth.sample_chain(hmm5.transition, 12, rng)
    w = synth.emit(st_, s, hmm5.filter.taps, hmm5.rates, 20.0, rng)
    B = emission_matrix(hmm5, w, s)
    p = viterbi_decode(hmm5, w, s, B)
    assert path_loglik(hmm5, p.states, B) == pytest.approx(p.loglik, abs=1e-9)


# ------------------------------------------------------------------ training


def _windows(A, filt, n, T, seed, eps=20.0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        s = np.full(T, 2000.0)
        st_ = synth.sample_chain(A, T, rng)
        out.append((synth.emit(st_, s, filt.taps, (2.0, 4.0, 8.0), eps, rng), s))
    return out


def test_training_recovers_known_chain():
    M = 3
    filt = hamming_init(M, 2000 / M)
    A = np.zeros((M + 3, M + 3))
    E, z0, zl, B, Ed = 0, 1, M, M + 1, M + 2
    A[E, [E, z0, B]] = [0.4, 0.3, 0.3]
    A[zl, [E, z0, Ed]] = [0.4, 0.3, 0.3]
    A[B, [E, B, Ed]] = [0.3, 0.4, 0.3]
    A[Ed, [E, B, Ed]] = [0.4, 0.3, 0.3]
    for j in range(1, M):
        A[j, j + 1] = 1.0
    res = train_segmental_kmeans(make_hmm(filt, epsilon_s=20.0), _windows(A, filt, 50, 200, 0))
    mask = structural_mask(M)
    assert np.abs(res.hmm.transition - A)[mask].max() <= 0.05
    assert np.all(np.diff(res.history) >= 0)
    assert not np.any(res.hmm.transition[~mask])
    np.testing.assert_allclose(res.hmm.transition.sum(axis=1), 1.0, atol=1e-12)


def test_unvisited_rows_keep_prior(hmm5):
    hmm5 = _tight(hmm5)
    s = np.full(8, 1500.0)
    res = train_segmental_kmeans(hmm5, [(s, s)])
    assert np.all(res.paths[0] == 0)
    np.testing.assert_array_equal(res.hmm.transition[1:], hmm5.transition[1:])
    assert res.converged


def test_short_windows_warn(hmm5):
    s = np.full(5, 1500.0)
    with pytest.warns(ShortWindowWarning):
        train_segmental_kmeans(hmm5, [(s[:1], s[:1]), (s, s)])
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        with pytest.raises(ValueError):
            train_segmental_kmeans(hmm5, [(s[:1], s[:1])])


def test_default_transition_uniform_on_mask():
    A = default_transition(4)
    mask = structural_mask(4)
    np.testing.assert_allclose(A.sum(axis=1), 1)
    assert np.all(A[~mask] == 0)
