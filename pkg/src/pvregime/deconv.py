"""Cloud-attenuation deconvolution.

Each day is explained as::

    w = s - U (s * a_b + T(h) z) + (I - U) s * a_e

where ``U`` selects samples at or below the clear-sky pattern, ``T(h) z`` is
the convolution of a short non-negative filter with an extended input of
length ``2N + M - 1``, and ``a_b``, ``a_e``, ``z`` are sparse and non-negative.
The per-day codes are found by accelerated projected proximal gradient; the
shared filter by a box-constrained least-squares step.  Alternating the two
never increases the penalised objective.
"""
from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import lsq_linear

log = logging.getLogger(__name__)


class ShapeError(ValueError):
    pass


class DivergenceError(RuntimeError):
    pass


class FilterUpdateWarning(UserWarning):
    pass


@dataclass(frozen=True, eq=False)
class DiffuseFilter:
    taps: np.ndarray

    def __post_init__(self):
        h = np.array(self.taps, dtype=float).ravel()
        if h.size < 1:
            raise ValueError("filter needs at least one tap")
        if np.any(h < 0) or not np.any(h > 0):
            raise ValueError("filter taps must be non-negative and not all zero")
        h.setflags(write=False)
        object.__setattr__(self, "taps", h)

    @property
    def M(self) -> int:
        return self.taps.size

    def to_dict(self) -> dict:
        return {"taps": [float(x) for x in self.taps]}

    @classmethod
    def from_dict(cls, d: dict) -> DiffuseFilter:
        return cls(np.asarray(d["taps"], dtype=float))


@dataclass(frozen=True, eq=False)
class CloudDecomposition:
    z: np.ndarray
    a_b: np.ndarray
    a_e: np.ndarray
    residual: np.ndarray
    nmse: float
    objective: float = float("nan")

    def to_dict(self) -> dict:
        return {
            "z": [float(x) for x in self.z],
            "a_b": [float(x) for x in self.a_b],
            "a_e": [float(x) for x in self.a_e],
            "nmse": float(self.nmse),
        }


@dataclass
class DictionaryResult:
    filter: DiffuseFilter
    decompositions: list[CloudDecomposition]
    objective: list[float] = field(default_factory=list)
    lambdas: tuple[float, float, float] = (0.0, 0.0, 0.0)
    start: str = "hamming"

    @property
    def nmse(self) -> np.ndarray:
        return np.array([d.nmse for d in self.decompositions])

    def to_dict(self) -> dict:
        return {
            "filter": self.filter.to_dict(),
            "lambdas": list(self.lambdas),
            "start": self.start,
            "objective": [float(f) for f in self.objective],
            "days": [d.to_dict() for d in self.decompositions],
        }


def toeplitz_apply(filt: DiffuseFilter | np.ndarray, z, n_out: int | None = None) -> np.ndarray:
    """``T(h) z`` with extended end conditions: ``out[k] = sum_q h[q] z[k + M-1-q]``.

    Works on the last axis, so a ``(days, 2N+M-1)`` batch gives ``(days, 2N)``.
    """
    h = filt.taps if isinstance(filt, DiffuseFilter) else np.asarray(filt, dtype=float)
    z = np.asarray(z, dtype=float)
    M = h.size
    L = z.shape[-1] - M + 1
    if L < 1:
        raise ShapeError(f"input length {z.shape[-1]} shorter than filter length {M}")
    if n_out is not None and L != n_out:
        raise ShapeError(f"input length {z.shape[-1]} does not match 2N + M - 1 = {n_out + M - 1}")
    out = np.zeros(z.shape[:-1] + (L,))
    for q in range(M):
        if h[q] != 0.0:
            out += h[q] * z[..., M - 1 - q : M - 1 - q + L]
    return out


def _toeplitz_adjoint(h: np.ndarray, y: np.ndarray) -> np.ndarray:
    M = h.size
    L = y.shape[-1]
    out = np.zeros(y.shape[:-1] + (L + M - 1,))
    for q in range(M):
        if h[q] != 0.0:
            out[..., M - 1 - q : M - 1 - q + L] += h[q] * y
    return out


def hamming_init(M: int, g: float = 1.0) -> DiffuseFilter:
    """Scaled Hamming window ``g (0.54 - 0.46 cos(2 pi q / (M-1)))``."""
    if M < 2:
        raise ValueError("Hamming initialisation needs M >= 2")
    if g <= 0:
        raise ValueError("scale g must be positive")
    q = np.arange(M)
    return DiffuseFilter(g * (0.54 - 0.46 * np.cos(2 * np.pi * q / (M - 1))))


def default_lambdas(s) -> tuple[float, float, float]:
    lam3 = 0.01 * float(np.nanmax(s))
    return (100 * lam3, 100 * lam3, lam3)


def check_lambdas(lam1: float, lam2: float, lam3: float) -> None:
    if min(lam1, lam2, lam3) < 0:
        raise ValueError("regularisation weights must be non-negative")
    slack = 1e-12 * max(lam1, 1.0)
    if not (lam1 >= lam2 - slack and lam2 >= 10 * lam3 - slack):
        raise ValueError(f"need lam1 >= lam2 >= 10 lam3, got ({lam1}, {lam2}, {lam3})")


# ------------------------------------------------------------ batch sparse coding


class _Problem:
    """Masks and constants for a batch of days under a fixed filter."""

    def __init__(self, W, S, h, lambdas):
        W = np.atleast_2d(np.asarray(W, dtype=float))
        S = np.atleast_2d(np.asarray(S, dtype=float))
        if W.shape != S.shape:
            raise ShapeError(f"w shape {W.shape} != s shape {S.shape}")
        if np.any(S < 0):
            raise ValueError("clear-sky values must be non-negative")
        self.W, self.S, self.h = W, S, np.asarray(h, dtype=float)
        self.lam1, self.lam2, self.lam3 = lambdas
        M = self.h.size
        obs = np.isfinite(W)
        Wf = np.where(obs, W, 0.0)
        self.obs = obs
        self.U = obs & (Wf <= S)
        self.E = obs & (Wf > S)
        self.D = np.where(self.U, S - Wf, 0.0)
        self.c = float(self.h.sum())
        # z entries that would leak into above-pattern samples
        forb = np.zeros((W.shape[0], W.shape[1] + M - 1), dtype=bool)
        for q in range(M):
            if self.h[q] > 0:
                forb[:, M - 1 - q : M - 1 - q + W.shape[1]] |= self.E
        self.z_free = ~forb
        self.u_free = self.U & (S > 0)
        with np.errstate(divide="ignore", invalid="ignore"):
            self.u_weight = np.where(self.u_free, self.lam2 / S, 0.0)
            ae = np.where(self.E & (S > 0), (Wf - S) / S - self.lam1 / (2 * S**2), 0.0)
        self.a_e = np.maximum(ae, 0.0)
        e_res = np.where(self.E, S - Wf + S * self.a_e, 0.0)
        self.edge_cost = (e_res**2).sum(axis=1) + self.lam1 * self.a_e.sum(axis=1)
        self.v_weight = self.lam3 / self.c

    def conv(self, v):
        return toeplitz_apply(self.h / self.c, v)

    def smooth(self, u, v):
        r = np.where(self.U, self.D - u - self.conv(v), 0.0)
        return r

    def objective(self, u, v, r=None):
        if r is None:
            r = self.smooth(u, v)
        return (
            (r**2).sum(axis=1)
            + (self.u_weight * u).sum(axis=1)
            + self.v_weight * v.sum(axis=1)
            + self.edge_cost
        )

    def prox(self, u, v, step):
        u = np.where(self.u_free, np.maximum(u - step * self.u_weight, 0.0), 0.0)
        v = np.where(self.z_free, np.maximum(v - step * self.v_weight, 0.0), 0.0)
        return u, v

    def grad(self, u, v):
        r = self.smooth(u, v)
        return -2.0 * r, -2.0 * _toeplitz_adjoint(self.h / self.c, r)


def _code_batch(W, S, h, lambdas, z0=None, ab0=None, tol=1e-8, max_iter=5000):
    """Solve every day's sparse-coding problem at once.

    Internally the direct-beam code is carried as ``u = s * a_b`` and the
    diffuse input as ``v = sum(h) * z`` so both blocks have unit gain and the
    Lipschitz constant of the smooth part is at most 4.
    """
    P = _Problem(W, S, h, lambdas)
    n_days, L = P.W.shape
    M = P.h.size
    if z0 is None:
        v = np.zeros((n_days, L + M - 1))
    else:
        v = np.where(P.z_free, np.asarray(z0, dtype=float).reshape(n_days, L + M - 1) * P.c, 0.0)
    if ab0 is None:
        u = np.zeros((n_days, L))
    else:
        u = np.where(P.u_free, np.asarray(ab0, dtype=float).reshape(n_days, L) * P.S, 0.0)
    step = 0.25
    F = P.objective(u, v)
    if not np.all(np.isfinite(F)):
        raise DivergenceError("non-finite objective at start")
    yu, yv = u.copy(), v.copy()
    t = np.ones(n_days)
    active = np.ones(n_days, dtype=bool)
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        gu, gv = P.grad(yu, yv)
        nu, nv = P.prox(yu - step * gu, yv - step * gv, step)
        Fn = P.objective(nu, nv)
        if not np.all(np.isfinite(Fn)):
            raise DivergenceError("non-finite objective; check the filter scale g")
        worse = Fn > F
        accept = active & ~worse
        conv = accept & ((F - Fn) <= tol * np.maximum(Fn, 1e-300))
        # restart momentum where the accelerated step went uphill
        restart = active & worse
        t_next = np.where(restart, 1.0, 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t**2)))
        beta = np.where(restart, 0.0, (t - 1.0) / t_next)[:, None]
        au = accept[:, None]
        yu_new = np.where(au, nu + beta * (nu - u), u)
        yv_new = np.where(au, nv + beta * (nv - v), v)
        u = np.where(au, nu, u)
        v = np.where(au, nv, v)
        F = np.where(accept, Fn, F)
        active &= ~conv
        keep = active[:, None]
        yu = np.where(keep, yu_new, u)
        yv = np.where(keep, yv_new, v)
        t = np.where(active, t_next, t)
        if not active.any():
            break
    with np.errstate(divide="ignore", invalid="ignore"):
        a_b = np.where(P.u_free, u / P.S, 0.0)
    z = v / P.c
    return P, a_b, z, F, n_iter


def _decompositions(P: _Problem, a_b, z, F) -> list[CloudDecomposition]:
    out = []
    Tz = toeplitz_apply(P.h, z)
    Wf = np.where(P.obs, P.W, 0.0)
    w_hat = np.where(P.U, P.S - P.S * a_b - Tz, P.S + P.S * P.a_e)
    resid = np.where(P.obs, Wf - w_hat, np.nan)
    for d in range(P.W.shape[0]):
        r = resid[d][P.obs[d]]
        energy = float(Wf[d] @ Wf[d])
        nmse = float(r @ r) / energy if energy > 0 else 0.0
        out.append(CloudDecomposition(z[d].copy(), a_b[d].copy(), P.a_e[d].copy(), resid[d], nmse, float(F[d])))
    return out


def decomposition_nmse(dec: CloudDecomposition, w) -> float:
    """NMSE recomputed from the stored residual and the observed samples."""
    w = np.asarray(w, dtype=float)
    obs = np.isfinite(w)
    r = dec.residual[obs]
    energy = float(w[obs] @ w[obs])
    return float(r @ r) / energy if energy > 0 else 0.0


def sparse_code_day(
    w,
    s,
    filt: DiffuseFilter,
    lam1: float | None = None,
    lam2: float | None = None,
    lam3: float | None = None,
    tol: float = 1e-8,
    max_iter: int = 5000,
) -> CloudDecomposition:
    """Sparse codes ``(z, a_b, a_e)`` for one day under a fixed filter.

    Minimises the masked squared error plus ``lam1 sum a_e + lam2 sum a_b +
    lam3 sum z`` subject to non-negativity and the complementarity
    constraints.  Missing samples (NaN) are left out of the data term.
    """
    s = np.asarray(s, dtype=float)
    if lam1 is None or lam2 is None or lam3 is None:
        d1, d2, d3 = default_lambdas(s)
        lam1 = d1 if lam1 is None else lam1
        lam2 = d2 if lam2 is None else lam2
        lam3 = d3 if lam3 is None else lam3
    check_lambdas(lam1, lam2, lam3)
    P, a_b, z, F, _ = _code_batch(w, s, filt.taps, (lam1, lam2, lam3), tol=tol, max_iter=max_iter)
    return _decompositions(P, a_b, z, F)[0]


def _filter_system(W, S, Z, AB, M):
    """Rows of the tap regression on attenuated samples, plus leaking taps."""
    W = np.atleast_2d(W)
    S = np.atleast_2d(S)
    Z = np.atleast_2d(Z)
    AB = np.atleast_2d(AB)
    L = W.shape[1]
    obs = np.isfinite(W)
    Wf = np.where(obs, W, 0.0)
    U = obs & (Wf <= S)
    E = obs & (Wf > S)
    cols = np.stack([Z[:, M - 1 - q : M - 1 - q + L] for q in range(M)], axis=-1)
    A = cols[U]
    b = (S - Wf - S * AB)[U]
    leaks = np.array([bool(np.any(cols[..., q][E] > 0)) for q in range(M)])
    return A, b, leaks


def update_filter(days, current: DiffuseFilter | None = None, upper: float | None = None) -> DiffuseFilter:
    """Non-negative least-squares taps given fixed codes, pooled over days.

    ``days`` is a sequence of ``(w, s, CloudDecomposition)``.  Taps that would
    push attenuation onto above-pattern samples are pinned at zero; ``upper``
    optionally bounds every tap.  When no day carries diffuse attenuation, or
    the fit collapses to zero, the current filter is returned with a
    :class:`FilterUpdateWarning`.
    """
    days = list(days)
    if not days:
        raise ValueError("no days supplied")
    M = days[0][2].z.size - np.asarray(days[0][0]).size + 1
    W = np.array([np.asarray(d[0], dtype=float) for d in days])
    S = np.array([np.asarray(d[1], dtype=float) for d in days])
    Z = np.array([d[2].z for d in days])
    AB = np.array([d[2].a_b for d in days])
    if not np.any(Z > 0):
        warnings.warn("all diffuse codes are zero; filter unchanged", FilterUpdateWarning, stacklevel=2)
        if current is None:
            raise ValueError("no current filter to fall back on")
        return current
    taps = _solve_taps(W, S, Z, AB, M, upper)
    if taps is None or not np.any(taps > 0):
        warnings.warn("tap fit collapsed to zero; filter unchanged", FilterUpdateWarning, stacklevel=2)
        if current is None:
            raise ValueError("no current filter to fall back on")
        return current
    return DiffuseFilter(taps)


def _solve_taps(W, S, Z, AB, M, upper):
    A, b, leaks = _filter_system(W, S, Z, AB, M)
    free = ~leaks & np.any(A != 0, axis=0)
    taps = np.zeros(M)
    if not free.any() or A.shape[0] == 0:
        return None
    ub = np.inf if upper is None else upper
    sol = lsq_linear(A[:, free], b, bounds=(0.0, ub), method="bvls", tol=1e-14, lsq_solver="exact")
    taps[free] = np.clip(sol.x, 0.0, ub)
    return taps


STARTS = ("hamming", "flat")


def initial_filter(start: str, M: int, g: float) -> DiffuseFilter:
    if start == "hamming":
        return hamming_init(M, g)
    if start == "flat":
        return DiffuseFilter(np.full(M, float(g)))
    raise ValueError(f"unknown filter start {start!r}; expected one of {STARTS}")


def learn_dictionary(
    W,
    S,
    M: int = 5,
    lambdas: tuple[float, float, float] | None = None,
    outer_iters: int = 20,
    g: float | None = None,
    tol: float = 1e-8,
    max_iter: int = 5000,
    outer_tol: float = 1e-10,
    starts=STARTS,
) -> DictionaryResult:
    """Alternate batched sparse coding and filter updates over all days.

    ``W`` and ``S`` are ``(days, 2N)`` arrays of observed power and clear-sky
    pattern on a shared grid.  The filter is kept inside ``[0, g]`` (default
    ``g = max(S) / M``): after each tap fit it is rescaled back to peak ``g``
    and the codes shrink by the same factor, which leaves the fit unchanged
    and can only lower the penalty.

    The problem is non-convex.  A Hamming start settles on filters centred
    in the window, so the alternation is also run from a flat start and the
    run with the lower final objective is kept (the earlier start on ties).
    """
    W = np.atleast_2d(np.asarray(W, dtype=float))
    S = np.atleast_2d(np.asarray(S, dtype=float))
    if outer_iters < 1:
        raise ValueError("outer_iters must be >= 1")
    if lambdas is None:
        lambdas = default_lambdas(S)
    check_lambdas(*lambdas)
    if g is None:
        g = float(S.max()) / M
    if not starts:
        raise ValueError("need at least one filter start")
    best = None
    for start in starts:
        res = _alternate(W, S, initial_filter(start, M, g), lambdas, outer_iters, g, tol, max_iter, outer_tol)
        res.start = start
        log.debug("start %s: final objective %.10g", start, res.objective[-1])
        if best is None or res.objective[-1] < best.objective[-1]:
            best = res
    return best


def _alternate(W, S, filt, lambdas, outer_iters, g, tol, max_iter, outer_tol) -> DictionaryResult:
    M = filt.M
    z = ab = None
    history: list[float] = []
    prev = np.inf
    for it in range(outer_iters):
        P, ab, z, F, n_inner = _code_batch(W, S, filt.taps, lambdas, z, ab, tol=tol, max_iter=max_iter)
        total = float(F.sum())
        if total > prev + outer_tol * max(abs(prev), 1.0):
            raise RuntimeError(f"objective increased at outer iteration {it}: {prev!r} -> {total!r}")
        history.append(total)
        log.debug("outer %d: objective %.10g (%d inner)", it, total, n_inner)
        if it == outer_iters - 1:
            break
        if not np.any(z > 0):
            log.info("no diffuse attenuation in any day; filter left at initialisation")
            break
        taps = _solve_taps(W, S, z, ab, M, g)
        if taps is None or not np.any(taps > 0):
            log.warning("tap fit collapsed; keeping previous filter")
            break
        peak = float(taps.max())
        filt = DiffuseFilter(taps * (g / peak))
        z = z * (peak / g)
        P = _Problem(W, S, filt.taps, lambdas)
        after = float(P.objective(np.where(P.u_free, ab * P.S, 0.0), np.where(P.z_free, z * P.c, 0.0)).sum())
        if after > total + outer_tol * max(abs(total), 1.0):
            raise RuntimeError(f"filter step increased objective: {total!r} -> {after!r}")
        if total - after <= outer_tol * max(abs(after), 1.0) and it > 0:
            prev = after
            P, ab, z, F, _ = _code_batch(W, S, filt.taps, lambdas, z, ab, tol=tol, max_iter=max_iter)
            history.append(float(F.sum()))
            break
        prev = after
    return DictionaryResult(filt, _decompositions(P, ab, z, F), history, tuple(float(x) for x in lambdas))
