"""Stochastic regime models: sunny Gaussian, overcast truncated Gaussian and
the partly-cloudy hidden Markov model with exponential emissions.

State layout (0-based) for filter length ``M`` and at most ``ell``
simultaneous diffuse coefficients::

    0                  E   empty support, power sits on the clear-sky pattern
    1 .. M             Z   single diffuse coefficient at lag 0 .. M-1
    M+1 .. N_s-3       Z   multi-lag supports (only when ell > 1)
    N_s - 2            B   direct-beam attenuation
    N_s - 1            Ed  edge-of-cloud gain
"""
from __future__ import annotations

import itertools
import logging
import math
import warnings
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from .deconv import DiffuseFilter
from .distributions import TruncatedGaussian, log_normal_mass

log = logging.getLogger(__name__)

DEFAULT_RATES = (2.0, 4.0, 8.0)


class DecodeError(RuntimeError):
    def __init__(self, sample: int, message: str = ""):
        super().__init__(message or f"no state can emit sample {sample}")
        self.sample = sample


class EstimationError(ValueError):
    pass


class ShortWindowWarning(UserWarning):
    pass


# ------------------------------------------------------------------ sunny / overcast


@dataclass(frozen=True)
class SunnyRegime:
    sigma_s: float

    def __post_init__(self):
        if not self.sigma_s > 0:
            raise ValueError("sigma_s must be positive")

    def logpdf(self, w, s):
        z = (np.asarray(w, dtype=float) - s) / self.sigma_s
        return -0.5 * z * z - math.log(self.sigma_s) - 0.5 * math.log(2 * math.pi)


@dataclass(frozen=True)
class OvercastRegime:
    alpha: float
    sigma_oc: float

    def __post_init__(self):
        if not self.sigma_oc > 0:
            raise ValueError("sigma_oc must be positive")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")

    def distribution(self, s: float) -> TruncatedGaussian:
        return TruncatedGaussian(self.alpha * s, self.sigma_oc, 0.0, s)


def overcast_logpdf(regime: OvercastRegime, w, s):
    """Truncated-normal log density on ``[0, s]`` with mean ``alpha s``."""
    w = np.asarray(w, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), w.shape)
    sig = regime.sigma_oc
    mu = regime.alpha * s
    lm = log_normal_mass(-mu / sig, (s - mu) / sig)
    z = (w - mu) / sig
    out = -0.5 * z * z - math.log(sig) - 0.5 * math.log(2 * math.pi) - lm
    ok = (w >= 0) & (w <= s) & (s > 0)
    return np.where(ok, out, -np.inf)


def estimate_sigmas(sunny_residuals, overcast_residuals, nameplate: float = 3740.0, min_samples: int = 10):
    """Sample standard deviations, floored at ``1e-3 * nameplate``."""
    floor = 1e-3 * nameplate
    out = []
    for name, r in (("sunny", sunny_residuals), ("overcast", overcast_residuals)):
        r = np.asarray(r, dtype=float).ravel()
        r = r[np.isfinite(r)]
        if r.size < min_samples:
            raise EstimationError(f"need at least {min_samples} {name} residuals, got {r.size}")
        sd = float(np.sqrt(np.mean((r - r.mean()) ** 2)))
        out.append(max(sd, floor))
    return tuple(out)


# ------------------------------------------------------------------ state space


def n_states(M: int, ell: int = 1) -> int:
    return sum(math.comb(M, j) for j in range(ell + 1)) + 2


def _supports(M: int, ell: int) -> list[tuple[int, ...]]:
    out: list[tuple[int, ...]] = []
    for size in range(1, ell + 1):
        out.extend(itertools.combinations(range(M), size))
    return out


def enumerate_states(M: int, ell: int = 1):
    """Support matrix ``Phi`` of shape ``(M + 2, N_s)`` and state labels.

    Rows of ``Phi`` follow the parameter vector ``[z lag M-1, ..., z lag 0,
    a_b, a_e]``; column ``i`` marks which of them are active in state ``i``.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    if not 1 <= ell < M:
        raise ValueError(f"need 1 <= ell < M, got ell={ell}, M={M}")
    sup = _supports(M, ell)
    ns = len(sup) + 2 + 1
    phi = np.zeros((M + 2, ns), dtype=np.int8)
    labels = ["E"]
    for col, lags in enumerate(sup, start=1):
        for j in lags:
            phi[M - 1 - j, col] = 1
        labels.append("Z" + "+".join(str(j) for j in lags))
    phi[M, ns - 2] = 1
    phi[M + 1, ns - 1] = 1
    labels += ["B", "Ed"]
    return phi, labels


def structural_mask(M: int, ell: int = 1) -> np.ndarray:
    """Allowed transitions.

    A diffuse support shifts one lag per sample; a coefficient may enter at
    lag 0 while the support stays within ``ell``.  Once the last lag leaves
    the filter memory the chain is back at a hub where it may rest (E),
    start a new cloud (Z lag 0, or B from E), or show an edge effect (Ed).
    The direct-beam and edge states can persist, hand over to each other,
    or clear to E.
    """
    if not 1 <= ell < M:
        raise ValueError(f"need 1 <= ell < M, got ell={ell}, M={M}")
    sup = _supports(M, ell)
    index = {s: i for i, s in enumerate(sup, start=1)}
    ns = len(sup) + 3
    E, B, Ed = 0, ns - 2, ns - 1
    z0 = index[(0,)]
    mask = np.zeros((ns, ns), dtype=bool)
    mask[E, [E, z0, B]] = True
    mask[B, [E, B, Ed]] = True
    mask[Ed, [E, B, Ed]] = True
    for lags, i in index.items():
        shifted = tuple(j + 1 for j in lags if j + 1 < M)
        if not shifted:
            mask[i, [E, z0, Ed]] = True
            continue
        mask[i, index[shifted]] = True
        grown = (0,) + shifted
        if len(grown) <= ell:
            mask[i, index[grown]] = True
    return mask


@dataclass(frozen=True)
class StatePath:
    states: np.ndarray
    loglik: float

    def __len__(self):
        return len(self.states)


@dataclass(frozen=True, eq=False)
class PartlyCloudyHmm:
    filter: DiffuseFilter
    transition: np.ndarray
    ell: int = 1
    rates: tuple[float, float, float] = DEFAULT_RATES
    epsilon_s: float = 20.0
    sigma_s: float | None = None
    sigma_oc: float | None = None
    initial: np.ndarray | None = field(default=None)

    def __post_init__(self):
        M = self.filter.M
        A = np.array(self.transition, dtype=float)
        ns = n_states(M, self.ell)
        enumerate_states(M, self.ell)
        if A.shape != (ns, ns):
            raise ValueError(f"transition must be {ns}x{ns}, got {A.shape}")
        if np.any(A < 0) or not np.allclose(A.sum(axis=1), 1.0, rtol=0, atol=1e-12):
            raise ValueError("transition rows must be non-negative and sum to 1")
        if np.any(A[~structural_mask(M, self.ell)] != 0):
            raise ValueError("transition puts mass on structurally forbidden entries")
        lz, lb, le = self.rates
        if not (0 < lz <= lb <= le):
            raise ValueError(f"rates must satisfy 0 < lambda_z <= lambda_b <= lambda_e, got {self.rates}")
        if not self.epsilon_s > 0:
            raise ValueError("epsilon_s must be positive")
        A.setflags(write=False)
        object.__setattr__(self, "transition", A)
        pi = np.full(ns, 1.0 / ns) if self.initial is None else np.asarray(self.initial, dtype=float)
        pi.setflags(write=False)
        object.__setattr__(self, "initial", pi)
        object.__setattr__(self, "rates", tuple(float(r) for r in self.rates))

    @property
    def M(self) -> int:
        return self.filter.M

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def E(self) -> int:
        return 0

    @property
    def B(self) -> int:
        return self.n_states - 2

    @property
    def Ed(self) -> int:
        return self.n_states - 1

    @cached_property
    def mask(self) -> np.ndarray:
        return structural_mask(self.M, self.ell)

    @cached_property
    def support_matrix(self) -> np.ndarray:
        return enumerate_states(self.M, self.ell)[0]

    @cached_property
    def labels(self) -> list[str]:
        return enumerate_states(self.M, self.ell)[1]

    @cached_property
    def lags(self) -> list[tuple[int, ...]]:
        """Active diffuse lags per state (empty for E, B, Ed)."""
        return [()] + _supports(self.M, self.ell) + [(), ()]

    def is_diffuse(self, i: int) -> bool:
        return 0 < i < self.B

    def gain(self, i: int) -> float:
        """Sum of filter taps over the state's active lags."""
        return float(sum(self.filter.taps[j] for j in self.lags[i]))

    def with_transition(self, A) -> PartlyCloudyHmm:
        return PartlyCloudyHmm(self.filter, A, self.ell, self.rates, self.epsilon_s, self.sigma_s, self.sigma_oc, self.initial)

    def to_dict(self) -> dict:
        lz, lb, le = self.rates
        return {
            "M": self.M,
            "ell": self.ell,
            "n_states": self.n_states,
            "transition": [[float(x) for x in row] for row in self.transition],
            "rates": {"lambda_z": lz, "lambda_b": lb, "lambda_e": le},
            "epsilon_s": self.epsilon_s,
            "filter": self.filter.to_dict(),
            "sigma_s": self.sigma_s,
            "sigma_oc": self.sigma_oc,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PartlyCloudyHmm:
        r = d["rates"]
        filt = DiffuseFilter.from_dict(d["filter"])
        if filt.M != d["M"]:
            raise ValueError("filter length does not match M")
        return cls(
            filt,
            np.asarray(d["transition"], dtype=float),
            int(d["ell"]),
            (r["lambda_z"], r["lambda_b"], r["lambda_e"]),
            float(d["epsilon_s"]),
            d.get("sigma_s"),
            d.get("sigma_oc"),
        )


def default_transition(M: int, ell: int = 1) -> np.ndarray:
    mask = structural_mask(M, ell).astype(float)
    return mask / mask.sum(axis=1, keepdims=True)


def make_hmm(filt: DiffuseFilter, ell: int = 1, transition=None, **kw) -> PartlyCloudyHmm:
    A = default_transition(filt.M, ell) if transition is None else transition
    return PartlyCloudyHmm(filt, A, ell, **kw)


# ------------------------------------------------------------------ emissions


def _log_trunc_exp(x, rate, length):
    """Log density of Exp(rate) truncated to [0, length], at x."""
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        logc = -np.log(-np.expm1(-rate * length))
        out = logc + np.log(rate) - rate * x
    return np.where((x >= 0) & (x <= length), out, -np.inf)


def emission_logpdf(hmm: PartlyCloudyHmm, i: int, w, s):
    """Log emission density of state ``i`` at power ``w`` given pattern ``s``.

    Outside a state's support the result is ``-inf``.
    """
    w = np.asarray(w, dtype=float)
    s = np.broadcast_to(np.asarray(s, dtype=float), w.shape)
    if not 0 <= i < hmm.n_states:
        raise ValueError(f"state {i} outside 0..{hmm.n_states - 1}")
    lz, lb, le = hmm.rates
    pos = s > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        if i == hmm.E:
            eps = hmm.epsilon_s
            out = np.where(np.abs(w - s) <= eps, -math.log(2 * eps), -np.inf)
            return out
        if i == hmm.Ed:
            rate = le / s
            y = w - s
            out = np.where(y >= 0, np.log(rate) - rate * y, -np.inf)
        elif i == hmm.B:
            rate = lb / s
            out = _log_trunc_exp(s - w, rate, s)
        else:
            g = hmm.gain(i)
            if g <= 0:
                return np.full(w.shape, -np.inf)
            out = _log_trunc_exp(s - w, lz / g, s)
    return np.where(pos & np.isfinite(w), out, -np.inf)


def emission_matrix(hmm: PartlyCloudyHmm, w, s) -> np.ndarray:
    """``(T, N_s)`` matrix of log emission densities."""
    w = np.asarray(w, dtype=float)
    return np.stack([emission_logpdf(hmm, i, w, s) for i in range(hmm.n_states)], axis=-1)


# ------------------------------------------------------------------ decoding


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(np.asarray(x, dtype=float))


def best_path(start, log_A, log_B) -> StatePath:
    """Most likely path with step-0 scores ``start + log_B[0]``.

    A backward max-product pass gives the best continuation from every
    state; the path is then picked forward.  Among paths whose score lies
    within rounding of the optimum, the lexicographically smallest wins, so
    ties go to the lowest state index at the earliest step.  Exact ties are
    common without observations (a01 a10 a00 equals a00 a01 a10).
    """
    log_A = np.asarray(log_A, dtype=float)
    log_B = np.asarray(log_B, dtype=float)
    T, ns = log_B.shape
    cont = np.zeros((T, ns))
    for t in range(T - 2, -1, -1):
        cont[t] = np.max(log_A + (log_B[t + 1] + cont[t + 1])[None, :], axis=1)
    path = np.empty(T, dtype=np.int64)
    cand = np.asarray(start, dtype=float) + log_B[0] + cont[0]
    for t in range(T):
        if t > 0:
            cand = log_A[path[t - 1]] + log_B[t] + cont[t]
        top = float(np.max(cand))
        path[t] = int(np.flatnonzero(cand >= top - 1e-10 * max(1.0, abs(top)))[0])
    score = float(start[path[0]] + log_B[0, path[0]])
    if T > 1:
        score += float(log_A[path[:-1], path[1:]].sum() + log_B[np.arange(1, T), path[1:]].sum())
    return StatePath(path, score)


def viterbi(log_pi, log_A, log_B) -> StatePath:
    """Max-product state path given observations; see :func:`best_path` for ties."""
    log_pi = np.asarray(log_pi, dtype=float)
    log_A = np.asarray(log_A, dtype=float)
    log_B = np.asarray(log_B, dtype=float)
    T, ns = log_B.shape
    if T == 0:
        raise ValueError("empty window")
    for t in range(T):
        if not np.any(np.isfinite(log_B[t])):
            raise DecodeError(t)
    delta = log_pi + log_B[0]
    if not np.any(np.isfinite(delta)):
        raise DecodeError(0, "no allowed initial state can emit sample 0")
    for t in range(1, T):
        delta = np.max(delta[:, None] + log_A, axis=0) + log_B[t]
        if not np.any(np.isfinite(delta)):
            raise DecodeError(t, f"no allowed path reaches sample {t}")
    return best_path(log_pi, log_A, log_B)


def viterbi_decode(hmm: PartlyCloudyHmm, w, s, log_B=None) -> StatePath:
    w = np.asarray(w, dtype=float)
    if w.size == 0:
        raise ValueError("empty window")
    if log_B is None:
        log_B = emission_matrix(hmm, w, s)
    return viterbi(_log(hmm.initial), _log(hmm.transition), log_B)


def path_loglik(hmm: PartlyCloudyHmm, path, log_B) -> float:
    path = np.asarray(path)
    la = _log(hmm.transition)
    out = _log(hmm.initial)[path[0]] + log_B[0, path[0]]
    if len(path) > 1:
        out += la[path[:-1], path[1:]].sum() + log_B[np.arange(1, len(path)), path[1:]].sum()
    return float(out)


@dataclass
class TrainingResult:
    hmm: PartlyCloudyHmm
    history: list[float]
    n_iter: int
    converged: bool
    paths: list[np.ndarray]


def train_segmental_kmeans(
    hmm: PartlyCloudyHmm,
    windows,
    max_iter: int = 50,
    smoothing: float = 1e-3,
) -> TrainingResult:
    """Viterbi training of the transition matrix with fixed emissions.

    Each iteration decodes every window, counts transitions along the best
    paths and re-normalises the counts on the structurally allowed entries
    (after adding ``smoothing``).  Rows never left during decoding keep their
    previous values.  The tracked objective is the joint path log-likelihood
    plus the smoothing prior ``smoothing * sum(log a_ij)``, which cannot
    decrease between iterations; a decrease raises ``RuntimeError``.
    """
    mask = hmm.mask
    prepared = []
    for idx, (w, s) in enumerate(windows):
        w = np.asarray(w, dtype=float)
        if w.size < 2:
            warnings.warn(f"window {idx} has fewer than 2 samples; skipped", ShortWindowWarning, stacklevel=2)
            continue
        prepared.append(emission_matrix(hmm, w, s))
    if not prepared:
        raise ValueError("no usable windows")

    def prior(A):
        return smoothing * float(_log(A[mask]).sum())

    history: list[float] = []
    prev_paths = None
    converged = False
    paths: list[np.ndarray] = []
    it = 0
    for it in range(1, max_iter + 1):
        log_pi, log_A = _log(hmm.initial), _log(hmm.transition)
        decoded = [viterbi(log_pi, log_A, B) for B in prepared]
        paths = [d.states for d in decoded]
        J = sum(d.loglik for d in decoded) + prior(hmm.transition)
        if history and J < history[-1] - 1e-9 * max(1.0, abs(history[-1])):
            raise RuntimeError(f"segmental k-means objective decreased: {history[-1]!r} -> {J!r}")
        history.append(J)
        if prev_paths is not None and all(np.array_equal(a, b) for a, b in zip(paths, prev_paths)):
            converged = True
            break
        counts = np.zeros(mask.shape)
        for p in paths:
            np.add.at(counts, (p[:-1], p[1:]), 1.0)
        A = np.array(hmm.transition)
        for i in range(A.shape[0]):
            if counts[i].sum() == 0:
                continue
            row = np.where(mask[i], counts[i] + smoothing, 0.0)
            A[i] = row / row.sum()
        hmm = hmm.with_transition(A)
        prev_paths = paths
    return TrainingResult(hmm, history, it, converged, paths)
