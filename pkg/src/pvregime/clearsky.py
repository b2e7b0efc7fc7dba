"""Clear-sky pattern: three C0-joined cubic Bernstein segments.

The pattern on a cloudless day is ``s[k] = sum_q c_q b_q(k)`` with ten basis
functions built from degree-3 Bernstein polynomials on three consecutive
segments ``[lo, k1)``, ``[k1, k2)``, ``[k2, hi)``.  Basis index ``q = 3i + j``
maps to polynomial ``j`` on segment ``i``; the shared indices 3 and 6 join the
segments so the pattern is continuous at the control points.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from math import comb

import numpy as np
from scipy.optimize import nnls

log = logging.getLogger(__name__)

N_COEFFS = 10
DEGREE = 3
MIN_SEGMENT = 4


class FitError(ValueError):
    pass


@dataclass(frozen=True)
class ControlPoints:
    k1: int
    k2: int
    defaulted: bool = False


@dataclass(frozen=True, eq=False)
class ClearSkyModel:
    """Fitted sunny-day pattern.

    ``daylight = (lo, hi)`` is the spline support ``lo <= k < hi``; outside it
    the pattern is zero.
    """

    coefficients: np.ndarray
    control_points: tuple[int, int]
    daylight: tuple[int, int]
    valid_day_range: tuple[int, int] = (0, 0)
    residual_std: float = 0.0
    fit_days: tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float)
        if c.shape != (N_COEFFS,):
            raise ValueError(f"expected {N_COEFFS} coefficients, got shape {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        lo, hi = self.daylight
        k1, k2 = self.control_points
        if not lo < k1 < k2 < hi:
            raise ValueError(f"control points {self.control_points} not strictly inside daylight {self.daylight}")

    def __call__(self, k) -> np.ndarray:
        return evaluate(self, k)

    def profile(self, N: int) -> np.ndarray:
        """Pattern over the full day grid ``k = -N .. N-1``."""
        return evaluate(self, np.arange(-N, N))

    def to_dict(self) -> dict:
        return {
            "coefficients": [float(c) for c in self.coefficients],
            "k1": int(self.control_points[0]),
            "k2": int(self.control_points[1]),
            "day_range": [int(d) for d in self.valid_day_range],
            "daylight": [int(d) for d in self.daylight],
            "residual_std": float(self.residual_std),
            "fit_days": [int(d) for d in self.fit_days],
        }

    @classmethod
    def from_dict(cls, d: dict) -> ClearSkyModel:
        return cls(
            np.asarray(d["coefficients"], dtype=float),
            (int(d["k1"]), int(d["k2"])),
            tuple(int(x) for x in d["daylight"]),
            tuple(int(x) for x in d.get("day_range", (0, 0))),
            float(d.get("residual_std", 0.0)),
            tuple(int(x) for x in d.get("fit_days", ())),
        )


def bernstein(j: int, t, degree: int = DEGREE) -> np.ndarray:
    """``binom(n, j) t^j (1-t)^(n-j)`` restricted to ``0 <= t < 1``."""
    t = np.asarray(t, dtype=float)
    inside = (t >= 0) & (t < 1)
    return np.where(inside, comb(degree, j) * t**j * (1 - t) ** (degree - j), 0.0)


def _segment_times(k, control_points, daylight):
    lo, hi = daylight
    k1, k2 = control_points
    k = np.asarray(k, dtype=float)
    return (
        (k - lo) / (k1 - lo),
        (k - k1) / (k2 - k1),
        (k - k2) / (hi - k2),
    )


def bernstein_basis(q: int, k, control_points, daylight) -> np.ndarray:
    """Basis function ``b_q`` at sample index (or real-valued time) ``k``.

    The shared indices q = 3 and q = 6 are the sum of the closing polynomial
    of one segment and the opening polynomial of the next.
    """
    if not 0 <= q < N_COEFFS:
        raise ValueError(f"basis index {q} outside 0..{N_COEFFS - 1}")
    times = _segment_times(k, control_points, daylight)
    out = np.zeros(np.shape(k))
    for i, t in enumerate(times):
        j = q - DEGREE * i
        if 0 <= j <= DEGREE:
            out = out + bernstein(j, t)
    return out


def basis_matrix(k, control_points, daylight) -> np.ndarray:
    """Design matrix with one column per basis function, shape ``(len(k), 10)``."""
    k = np.atleast_1d(np.asarray(k, dtype=float))
    times = _segment_times(k, control_points, daylight)
    B = np.zeros((k.size, N_COEFFS))
    for i, t in enumerate(times):
        for j in range(DEGREE + 1):
            B[:, DEGREE * i + j] += bernstein(j, t)
    return B


def evaluate(model: ClearSkyModel, k) -> np.ndarray:
    scalar = np.ndim(k) == 0
    out = basis_matrix(k, model.control_points, model.daylight) @ model.coefficients
    return float(out[0]) if scalar else out


# ------------------------------------------------------------ control points


def tercile_points(daylight) -> ControlPoints:
    lo, hi = daylight
    span = hi - lo
    return ControlPoints(lo + int(round(span / 3)), lo + int(round(2 * span / 3)), defaulted=True)


def change_scores(w) -> np.ndarray:
    """Departure of each second difference from the mean of its neighbours.

    Zero wherever the signal is locally cubic; a slope break at sample i shows
    as a spike at i, a curvature break as a pair of half-height spikes.
    """
    w = np.asarray(w, dtype=float)
    score = np.zeros(w.size)
    if w.size < 5:
        return score
    d2 = w[2:] - 2 * w[1:-1] + w[:-2]
    score[2:-2] = np.abs(d2[1:-1] - 0.5 * (d2[:-2] + d2[2:]))
    return score


def detect_control_points(
    w, daylight, min_segment: int = MIN_SEGMENT, floor_rel: float = 1e-6, floor_noise: float = 6.0
) -> ControlPoints:
    """Locate the two control points of a sunny day from its samples.

    ``w`` holds the samples for ``k = lo .. hi-1``.  Candidates must leave at
    least ``min_segment`` samples in every segment and beat a floor set from the
    signal scale and the median score; otherwise tercile points are returned
    with ``defaulted=True``.
    """
    lo, hi = daylight
    w = np.asarray(w, dtype=float)
    if w.size != hi - lo:
        raise ValueError(f"expected {hi - lo} samples for daylight {daylight}, got {w.size}")
    w = np.nan_to_num(w)
    score = change_scores(w)
    floor = max(floor_rel * float(np.max(np.abs(w), initial=0.0)), floor_noise * float(np.median(score)))
    k = np.arange(lo, hi)
    ok = (k - lo >= min_segment) & (hi - k >= min_segment) & (score > floor)
    order = np.argsort(-score, kind="stable")
    cands = [int(i) for i in order if ok[i]]
    if len(cands) >= 2:
        first = cands[0]
        for second in cands[1:]:
            if abs(second - first) >= min_segment:
                a, b = sorted((first, second))
                return ControlPoints(int(k[a]), int(k[b]))
    return tercile_points(daylight)


# ------------------------------------------------------------------- fitting


def _stack_days(days, daylight, N):
    lo, hi = daylight
    ks, ws = [], []
    for w in days:
        w = np.asarray(w, dtype=float)
        if w.size != 2 * N:
            raise ValueError("all days must share the same grid")
        kk = np.arange(lo, hi)
        vals = w[kk + N]
        good = np.isfinite(vals)
        ks.append(kk[good])
        ws.append(vals[good])
    return np.concatenate(ks), np.concatenate(ws)


def fit_sunny(
    days,
    control_points,
    daylight,
    valid_day_range=(0, 0),
    fit_days=(),
) -> ClearSkyModel:
    """Joint least-squares fit of the ten coefficients to one or more sunny days.

    ``days`` is a sequence of full-grid day arrays of length ``2N``.  If the
    unconstrained fit dips below zero anywhere on the daylight grid the fit is
    redone with non-negative coefficients, which keeps the pattern
    non-negative because every basis function is.
    """
    days = [np.asarray(d, dtype=float) for d in days]
    if not days:
        raise FitError("need at least one sunny day")
    N = days[0].size // 2
    if isinstance(control_points, ControlPoints):
        control_points = (control_points.k1, control_points.k2)
    lo, hi = daylight
    if lo < -N or hi > N:
        raise ValueError(f"daylight {daylight} outside the day grid")
    k, w = _stack_days(days, daylight, N)
    B = basis_matrix(k, control_points, daylight)
    if np.linalg.matrix_rank(B) < N_COEFFS:
        k1, k2 = control_points
        edges = [(lo, k1), (k1, k2), (k2, hi)]
        counts = [np.unique(k[(k >= a) & (k < b)]).size for a, b in edges]
        worst = int(np.argmin(counts))
        raise FitError(f"rank-deficient design: segment {worst} has {counts[worst]} distinct samples")
    coef, *_ = np.linalg.lstsq(B, w, rcond=None)
    grid = basis_matrix(np.arange(lo, hi), control_points, daylight)
    if np.any(grid @ coef < 0):
        coef, _ = nnls(B, w)
    resid = w - B @ coef
    dof = max(resid.size - N_COEFFS, 1)
    return ClearSkyModel(
        coef,
        tuple(int(c) for c in control_points),
        (int(lo), int(hi)),
        tuple(int(d) for d in valid_day_range),
        float(np.sqrt(resid @ resid / dof)),
        tuple(int(d) for d in fit_days),
    )


def _day_rss(model: ClearSkyModel, w) -> float:
    w = np.asarray(w, dtype=float)
    s = model.profile(w.size // 2)
    lo, hi = model.daylight
    N = w.size // 2
    seg = slice(lo + N, hi + N)
    r = (w[seg] - s[seg])[np.isfinite(w[seg])]
    return float(r @ r)


def update_seasonal(
    model: ClearSkyModel, w, gamma: float = 0.1, redetect: bool = True
) -> tuple[ClearSkyModel, str]:
    """Blend a fresh single-day fit into the model: ``c <- (1-g) c + g c_fresh``.

    Returns ``(model, status)`` with status ``"updated"``, ``"redetected"``
    (control points moved because the stale model's residual on this day was
    at least twice the fresh fit's) or ``"failed"`` (model unchanged).
    """
    if not 0.0 <= gamma <= 1.0:
        raise ValueError("gamma must lie in [0, 1]")
    if gamma == 0.0:
        return model, "updated"
    w = np.asarray(w, dtype=float)
    N = w.size // 2
    try:
        fresh = fit_sunny([w], model.control_points, model.daylight)
    except (FitError, ValueError) as exc:
        log.warning("seasonal update skipped: %s", exc)
        return model, "failed"
    status = "updated"
    stale = model
    if redetect and _day_rss(model, w) > 2.0 * _day_rss(fresh, w):
        lo, hi = model.daylight
        cp = detect_control_points(w[lo + N : hi + N], model.daylight)
        if not cp.defaulted and (cp.k1, cp.k2) != tuple(model.control_points):
            try:
                fresh = fit_sunny([w], cp, model.daylight)
                # re-express the stale pattern on the new basis so the blend is meaningful
                stale = fit_sunny([model.profile(N)], cp, model.daylight)
                status = "redetected"
            except FitError as exc:
                log.warning("control point re-detection failed: %s", exc)
    coef = (1.0 - gamma) * stale.coefficients + gamma * fresh.coefficients
    return (
        replace(
            model,
            coefficients=coef,
            control_points=fresh.control_points,
            residual_std=(1.0 - gamma) * model.residual_std + gamma * fresh.residual_std,
        ),
        status,
    )


def select_sunny_days(series, max_days: int = 10, roughness_factor: float = 2.0) -> list[int]:
    """Pick candidate cloudless days: high energy and smooth second differences."""
    vals = np.nan_to_num(series.values)
    energy = vals.sum(axis=1)
    if energy.max() <= 0:
        return []
    d2 = np.diff(vals, n=2, axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        rough = np.where(energy > 0, (d2**2).sum(axis=1) / np.maximum((vals**2).sum(axis=1), 1e-12), np.inf)
    ok = energy >= 0.85 * energy.max()
    if not ok.any():
        return []
    best = rough[ok].min()
    cand = np.flatnonzero(ok & (rough <= roughness_factor * best))
    cand = cand[np.argsort(rough[cand], kind="stable")][:max_days]
    return sorted(int(c) for c in cand)
