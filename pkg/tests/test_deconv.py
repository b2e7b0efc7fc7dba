import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.linalg import toeplitz

from pvregime import synth
from pvregime.deconv import (
    DiffuseFilter,
    FilterUpdateWarning,
    ShapeError,
    check_lambdas,
    decomposition_nmse,
    default_lambdas,
    hamming_init,
    learn_dictionary,
    sparse_code_day,
    toeplitz_apply,
    update_filter,
)


def _matrix(h, L):
    """Materialised T(h): row k holds h[M-1-(j-k)] in column j."""
    h = np.asarray(h, dtype=float)
    M = h.size
    first_row = np.r_[h[::-1], np.zeros(L - 1)]
    first_col = np.r_[h[-1], np.zeros(L - 1)]
    return toeplitz(first_col, first_row)


def test_identity_filter():
    z = np.arange(6.0)
    np.testing.assert_array_equal(toeplitz_apply(np.array([1.0]), z), z)


def test_impulse_through_shift_filter():
    # h = [0, 1], N = 3: 6 outputs from 7 inputs
    h = np.array([0.0, 1.0])
    for i in range(7):
        z = np.zeros(7)
        z[i] = 1.0
        out = toeplitz_apply(h, z, 6)
        ref = _matrix(h, 6) @ z
        np.testing.assert_array_equal(out, ref)
        assert out.sum() == (1.0 if i < 6 else 0.0)


def test_zero_input():
    assert not np.any(toeplitz_apply(hamming_init(4), np.zeros(9)))


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 8), st.integers(1, 4), st.integers(0, 2**31 - 1))
def test_matches_materialised_matrix(N, M, seed):
    r = np.random.default_rng(seed)
    L = 2 * N
    h = r.uniform(0, 1, M)
    z = r.normal(size=L + M - 1)
    np.testing.assert_allclose(toeplitz_apply(h, z, L), _matrix(h, L) @ z, rtol=1e-12, atol=1e-12)
    np.testing.assert_allclose(toeplitz_apply(h, z, L), np.convolve(z, h, "valid"), rtol=1e-12, atol=1e-12)


def test_shape_errors():
    with pytest.raises(ShapeError):
        toeplitz_apply(np.ones(3), np.ones(5), 4)
    with pytest.raises(ShapeError):
        toeplitz_apply(np.ones(6), np.ones(3))


def test_hamming_values():
    h = hamming_init(5, 1.0).taps
    np.testing.assert_allclose(h, [0.08, 0.54, 1.0, 0.54, 0.08], atol=1e-12)
    np.testing.assert_allclose(h, h[::-1])
    for M in (2, 3, 7, 10):
        t = hamming_init(M, 3.0).taps
        assert t[0] == pytest.approx(0.24) and t[-1] == pytest.approx(0.24)
    np.testing.assert_allclose(hamming_init(5, 2.0).taps, 2 * h)


def test_filter_validation():
    with pytest.raises(ValueError):
        DiffuseFilter(np.zeros(3))
    with pytest.raises(ValueError):
        DiffuseFilter(np.array([1.0, -0.1]))


def test_lambda_ordering():
    check_lambdas(100, 100, 10)
    with pytest.raises(ValueError):
        check_lambdas(100, 101, 1)
    with pytest.raises(ValueError):
        check_lambdas(100, 50, 6)
    assert default_lambdas(np.array([0, 2000.0])) == (2000.0, 2000.0, 20.0)


def test_clear_day_gives_zero_codes():
    s = np.linspace(100, 2000, 20)
    dec = sparse_code_day(s, s, hamming_init(5, 400))
    assert not np.any(dec.z) and not np.any(dec.a_b) and not np.any(dec.a_e)
    assert dec.objective == 0.0 and dec.nmse == 0.0


def test_single_active_coefficient_closed_form():
    # M = 1: z[k] drives sample k alone; the smooth term has no 1/2 factor,
    # so the minimiser of (h0 z - h0 c)^2 + lam3 z is c - lam3 / (2 h0^2)
    s = np.full(10, 1000.0)
    h0, c, lam3 = 500.0, 0.8, 10.0
    w = s.copy()
    w[4] -= h0 * c
    dec = sparse_code_day(w, s, DiffuseFilter(np.array([h0])), 100.0, 100.0, lam3, tol=1e-16, max_iter=20000)
    expect = c - lam3 / (2 * h0**2)
    assert dec.z[4] == pytest.approx(expect, abs=1e-8)
    assert np.count_nonzero(dec.z) == 1
    assert not np.any(dec.a_b)


def test_edge_spike_sign_mask():
    s = np.full(12, 1000.0)
    w = s.copy()
    w[6] = 1.2 * s[6]
    filt = hamming_init(3, 200)
    lam1 = 50.0
    dec = sparse_code_day(w, s, filt, lam1, 50.0, 5.0)
    assert np.flatnonzero(dec.a_e).tolist() == [6]
    assert dec.a_e[6] == pytest.approx(0.2 - lam1 / (2 * 1000.0**2), abs=1e-12)
    assert dec.a_b[6] == 0.0
    # no z entry that reaches sample 6 may be active
    for q in range(3):
        assert dec.z[6 + 2 - q] == 0.0


def test_complementarity_on_random_day():
    rng = np.random.default_rng(4)
    s = np.full(30, 1500.0)
    w = s + rng.normal(0, 150, 30)
    filt = hamming_init(4, 300)
    dec = sparse_code_day(w, s, filt)
    above = w > s
    assert np.all(dec.a_b[above] == 0)
    assert np.all(dec.a_e[~above] == 0)
    for q in range(4):
        assert np.all(dec.z[3 - q : 3 - q + 30][above] == 0)
    assert dec.nmse == pytest.approx(decomposition_nmse(dec, w))


def test_missing_samples_ignored():
    s = np.full(10, 1000.0)
    w = s.copy()
    w[3] = np.nan
    dec = sparse_code_day(w, s, hamming_init(3, 100))
    assert np.isnan(dec.residual[3])
    assert dec.objective == 0.0


def _truth(seed, n_days=1, noise=0.0):
    s = synth.default_clearsky().profile(48)[20:76]
    filt = hamming_init(5, s.max() / 5)
    return synth.deconv_days(n_days, s, filt, np.random.default_rng(seed), noise=noise), filt


def test_update_filter_recovers_taps_with_fixed_codes():
    truth, filt = _truth(0)
    dec = _codes_from_truth(truth, 0)
    got = update_filter([(truth.W[0], truth.S[0], dec)])
    np.testing.assert_allclose(got.taps, filt.taps, rtol=1e-6)


def _codes_from_truth(truth, d):
    from pvregime.deconv import CloudDecomposition

    return CloudDecomposition(truth.z[d], truth.a_b[d], truth.a_e[d], np.zeros(truth.W.shape[1]), 0.0)


def test_update_filter_two_identical_days():
    truth, filt = _truth(1)
    dec = _codes_from_truth(truth, 0)
    one = update_filter([(truth.W[0], truth.S[0], dec)])
    two = update_filter([(truth.W[0], truth.S[0], dec)] * 2)
    np.testing.assert_allclose(one.taps, two.taps, rtol=1e-10)


def test_update_filter_all_zero_codes_warns():
    from pvregime.deconv import CloudDecomposition

    s = np.full(10, 100.0)
    dec = CloudDecomposition(np.zeros(12), np.zeros(10), np.zeros(10), np.zeros(10), 0.0)
    cur = hamming_init(3)
    with pytest.warns(FilterUpdateWarning):
        assert update_filter([(s, s, dec)], cur) is cur


def test_learn_all_sunny():
    s = np.tile(np.linspace(100, 2000, 30), (3, 1))
    res = learn_dictionary(s, s, 5)
    np.testing.assert_allclose(res.filter.taps, hamming_init(5, s.max() / 5).taps)
    for d in res.decompositions:
        assert not np.any(d.z) and not np.any(d.a_b) and not np.any(d.a_e)


def test_learn_monotone_and_noiseless_fit():
    truth, filt = _truth(3, n_days=4)
    res = learn_dictionary(truth.W, truth.S, 5)
    hist = np.asarray(res.objective)
    assert np.all(np.diff(hist) <= 1e-10 * np.maximum(np.abs(hist[:-1]), 1.0))
    assert res.nmse.max() < 1e-4
    assert res.filter.taps.max() == pytest.approx(truth.S.max() / 5)
    assert res.to_dict()["filter"]["taps"] == [float(x) for x in res.filter.taps]


def test_learn_noisy_monotone():
    truth, _ = _truth(5, n_days=3, noise=30.0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = learn_dictionary(truth.W, truth.S, 4, outer_iters=8)
    hist = np.asarray(res.objective)
    assert np.all(np.diff(hist) <= 1e-10 * np.maximum(np.abs(hist[:-1]), 1.0))


def test_learn_rejects_bad_input():
    with pytest.raises(ValueError):
        learn_dictionary(np.ones((1, 5)), np.ones((1, 5)), 3, (1, 2, 3))
    with pytest.raises(ShapeError):
        learn_dictionary(np.ones((1, 5)), np.ones((1, 6)), 3)


def test_off_centre_filter_recovered_from_flat_start():
    s = synth.default_clearsky().profile(48)[20:76]
    g = s.max() / 5
    filt = DiffuseFilter(g * np.array([1.0, 0.6, 0.3, 0.15, 0.05]))
    truth = synth.deconv_days(6, s, filt, np.random.default_rng(8))
    lam3 = 0.15 * s.max()
    only_hamming = learn_dictionary(truth.W, truth.S, 5, (10 * lam3, 10 * lam3, lam3), 300, starts=("hamming",))
    both = learn_dictionary(truth.W, truth.S, 5, (10 * lam3, 10 * lam3, lam3), 300)
    assert both.start == "flat"
    assert both.objective[-1] < only_hamming.objective[-1]
    err = np.linalg.norm(both.filter.taps - filt.taps) / np.linalg.norm(filt.taps)
    assert err < 1e-3
    assert both.to_dict()["start"] == "flat"


def test_unknown_start_rejected():
    s = np.tile(np.linspace(100, 2000, 30), (1, 1))
    with pytest.raises(ValueError):
        learn_dictionary(s, s, 3, starts=("ramp",))
    with pytest.raises(ValueError):
        learn_dictionary(s, s, 3, starts=())
