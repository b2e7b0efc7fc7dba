"""Reference forecasters: diurnal persistence, smart persistence, AR and
regime-switching AR on the stochastic component ``x = w - s``."""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass, field

import numpy as np

from .clearsky import ClearSkyModel
from .detect import ClassificationError, Regime, Thresholds, classify
from .distributions import Degenerate, Gaussian
from .forecast import ForecastTable
from .regimes import PartlyCloudyHmm
from .timeseries import PowerSeries

log = logging.getLogger(__name__)

DEFAULT_ORDER = 4


class RidgeWarning(UserWarning):
    pass


# ------------------------------------------------------------------ persistence


def diurnal_forecast(series: PowerSeries, n: int, k2: int, chi: int):
    """Previous day's values at ``k2+1 .. k2+chi``; second array flags availability."""
    N = series.N
    ks = np.arange(k2 + 1, k2 + chi + 1)
    out = np.full(chi, np.nan)
    inside = ks < N
    if n >= 1:
        out[inside] = series.values[n - 1, ks[inside] + N]
    return out, np.isfinite(out)


def smart_persistence_forecast(w_window, s_window, s_future, nameplate: float = 3740.0, eps: float = 1.0):
    """Hold the clear-sky index of the last sample over the horizon.

    Returns ``(points, sigmas, ok)``.  The spread is the window variance of
    ``w / s`` rescaled by ``s^2`` and floored at ``1e-3 * nameplate``.  When
    the last pattern value is at or below ``eps`` ``ok`` is False and the
    caller should fall back to diurnal persistence.
    """
    w_window = np.asarray(w_window, dtype=float)
    s_window = np.asarray(s_window, dtype=float)
    s_future = np.asarray(s_future, dtype=float)
    floor = 1e-3 * nameplate
    if not (s_window[-1] > eps) or not np.isfinite(w_window[-1]):
        return np.full(s_future.shape, np.nan), np.full(s_future.shape, floor), False
    ratio = w_window[-1] / s_window[-1]
    good = np.isfinite(w_window) & (s_window > eps)
    r = w_window[good] / s_window[good]
    var = float(np.var(r)) if r.size > 1 else 0.0
    sig = np.maximum(np.sqrt(var) * s_future, floor)
    return s_future * ratio, sig, True


# ------------------------------------------------------------------ AR


@dataclass(frozen=True, eq=False)
class ArModel:
    coefficients: np.ndarray
    noise_var: float
    ridge: bool = False
    regimes: dict = field(default_factory=dict)  # Regime -> ArModel for the switching variant

    def __post_init__(self):
        a = np.array(self.coefficients, dtype=float).ravel()
        if a.size < 1:
            raise ValueError("AR order must be >= 1")
        if not self.noise_var > 0:
            raise ValueError("noise variance must be positive")
        a.setflags(write=False)
        object.__setattr__(self, "coefficients", a)

    @property
    def order(self) -> int:
        return self.coefficients.size

    def for_regime(self, regime) -> ArModel:
        return self.regimes.get(regime, self)

    def to_dict(self) -> dict:
        out = {"order": self.order, "coefficients": [float(c) for c in self.coefficients], "noise_var": self.noise_var}
        if self.regimes:
            out["regimes"] = {Regime(r).label: m.to_dict() for r, m in sorted(self.regimes.items())}
        return out

    @classmethod
    def from_dict(cls, d: dict) -> ArModel:
        regimes = {Regime.parse(k): cls.from_dict(v) for k, v in d.get("regimes", {}).items()}
        return cls(np.asarray(d["coefficients"], dtype=float), float(d["noise_var"]), regimes=regimes)


def _design(segments, order, labels=None, regime=None):
    X, y = [], []
    for idx, x in enumerate(segments):
        x = np.asarray(x, dtype=float)
        if x.size <= order:
            continue
        rows = np.stack([x[order - i - 1 : x.size - i - 1] for i in range(order)], axis=1)
        target = x[order:]
        keep = np.isfinite(target) & np.all(np.isfinite(rows), axis=1)
        if labels is not None:
            lab = np.asarray(labels[idx])[order - 1 : x.size - 1]
            keep &= lab == regime
        X.append(rows[keep])
        y.append(target[keep])
    if not X:
        return np.zeros((0, order)), np.zeros(0)
    return np.concatenate(X), np.concatenate(y)


def _ls_fit(X, y, order) -> ArModel:
    if y.size == 0 or not (np.any(y != 0) or np.any(X != 0)):
        raise ValueError("degenerate AR training data (all zero)")
    G = X.T @ X
    rhs = X.T @ y
    ridge = False
    if np.linalg.cond(G) > 1e12:
        warnings.warn("near-singular AR normal equations; ridge loading applied", RidgeWarning, stacklevel=3)
        G = G + 1e-6 * max(float(np.trace(G)) / order, 1e-12) * np.eye(order)
        ridge = True
    a = np.linalg.solve(G, rhs)
    resid = y - X @ a
    dof = max(y.size - order, 1)
    nv = float(resid @ resid) / dof
    if not nv > 0:
        nv = 1e-12 * max(float(y @ y) / y.size, 1.0)
    return ArModel(a, nv, ridge)


def is_stationary(coefficients) -> bool:
    """All roots of ``z^p - a_1 z^(p-1) - ... - a_p`` strictly inside the unit circle."""
    a = np.asarray(coefficients, dtype=float)
    return bool(np.all(np.abs(np.roots(np.r_[1.0, -a])) < 1.0))


def fit_ar(segments, order: int = DEFAULT_ORDER, labels=None) -> ArModel:
    """Least-squares AR fit without intercept over independent segments.

    ``segments`` is a list of 1-D arrays (one per day); regressions never
    cross segment boundaries and rows containing NaN are dropped.  With
    ``labels`` (per-sample regime arrays aligned with ``segments``) a separate
    model is fit per regime on rows whose most recent lag carries that label;
    regimes with fewer than ``10 * order`` rows, or whose fit is explosive,
    fall back to the pooled fit.
    """
    if order < 1:
        raise ValueError("order must be >= 1")
    if isinstance(segments, np.ndarray) and segments.ndim == 1:
        segments = [segments]
    X, y = _design(segments, order)
    if y.size < 10 * order:
        raise ValueError(f"need at least {10 * order} training rows, got {y.size}")
    pooled = _ls_fit(X, y, order)
    if labels is None:
        return pooled
    regimes = {}
    for r in Regime:
        Xr, yr = _design(segments, order, labels, int(r))
        if yr.size < 10 * order:
            log.info("regime %s has %d AR rows; using pooled fit", r.label, yr.size)
            regimes[r] = pooled
            continue
        try:
            fit = _ls_fit(Xr, yr, order)
        except ValueError:
            regimes[r] = pooled
            continue
        if not is_stationary(fit.coefficients):
            log.info("regime %s AR fit is non-stationary; using pooled fit", r.label)
            fit = pooled
        regimes[r] = fit
    return ArModel(pooled.coefficients, pooled.noise_var, pooled.ridge, regimes)


def ar_forecast(model: ArModel, recent, chi: int):
    """Iterated means and MA-expansion variances for ``chi`` steps ahead."""
    a = model.coefficients
    p = a.size
    recent = np.asarray(recent, dtype=float)
    if recent.size < p:
        raise ValueError(f"need {p} recent values, got {recent.size}")
    hist = list(np.nan_to_num(recent[-p:]))
    means = np.empty(chi)
    for t in range(chi):
        nxt = sum(a[i] * hist[-1 - i] for i in range(p))
        means[t] = nxt
        hist.append(nxt)
    psi = np.zeros(chi)
    psi[0] = 1.0
    for j in range(1, chi):
        psi[j] = sum(a[i - 1] * psi[j - i] for i in range(1, min(j, p) + 1))
    var = model.noise_var * np.cumsum(psi**2)
    return means, var


# ------------------------------------------------------------------ labels and rolling


def regime_labels(series: PowerSeries, clearsky: ClearSkyModel, thresholds: Thresholds, hmm: PartlyCloudyHmm, window=4):
    """Per-sample regime of the window ending at each daylight sample (-1 elsewhere)."""
    N = series.N
    s = clearsky.profile(N)
    lo, hi = clearsky.daylight
    out = np.full(series.values.shape, -1, dtype=int)
    for n in range(series.n_days):
        w = series.values[n]
        first = None
        for k2 in range(lo + window - 1, hi):
            k1 = k2 - window + 1
            try:
                d = classify(w[k1 + N : k2 + N + 1], s[k1 + N : k2 + N + 1], thresholds, hmm)
            except ClassificationError:
                continue
            out[n, k2 + N] = int(d.regime)
            if first is None:
                first = int(d.regime)
                out[n, lo + N : k2 + N] = first
    return out


def stochastic_segments(series: PowerSeries, clearsky: ClearSkyModel, days=None):
    N = series.N
    s = clearsky.profile(N)
    lo, hi = clearsky.daylight
    days = range(series.n_days) if days is None else days
    return [series.values[n, lo + N : hi + N] - s[lo + N : hi + N] for n in days]


def fit_baselines(series, clearsky, thresholds, hmm, window=4, order=DEFAULT_ORDER, days=None):
    """Plain and switching AR fitted on the daylight stochastic component."""
    days = list(range(series.n_days)) if days is None else list(days)
    segs = stochastic_segments(series, clearsky, days)
    labels_full = regime_labels(series, clearsky, thresholds, hmm, window)
    lo, hi = clearsky.daylight
    N = series.N
    labels = [labels_full[n, lo + N : hi + N] for n in days]
    return fit_ar(segs, order), fit_ar(segs, order, labels)


def rolling_baselines(
    series: PowerSeries,
    clearsky: ClearSkyModel,
    thresholds: Thresholds,
    hmm: PartlyCloudyHmm,
    ar: ArModel | None,
    sar: ArModel | None,
    window: int = 4,
    chi: int = 12,
    days=None,
    nameplate: float | None = None,
) -> ForecastTable:
    """Baseline forecasts from the same origins the main forecaster uses."""
    nameplate = series.nameplate if nameplate is None else nameplate
    N = series.N
    s_day = clearsky.profile(N)
    lo, hi = clearsky.daylight
    table = ForecastTable()
    days = range(series.n_days) if days is None else days
    sig_floor = 1e-3 * nameplate
    for n in days:
        w_day = series.values[n]
        for k2 in range(lo + window - 1, hi - chi):
            k1 = k2 - window + 1
            w_win = w_day[k1 + N : k2 + N + 1]
            s_win = s_day[k1 + N : k2 + N + 1]
            try:
                regime = classify(w_win, s_win, thresholds, hmm).regime
            except ClassificationError:
                continue
            ks = np.arange(k2 + 1, k2 + chi + 1)
            s_fut = s_day[ks + N]
            di, di_ok = diurnal_forecast(series, n, k2, chi)
            for t in range(chi):
                flag = "" if di_ok[t] else "unavailable"
                dist = Degenerate(di[t]) if di_ok[t] else Degenerate(math.nan)
                table.add("diurnal", n, k2, ks[t], t + 1, regime.label, di[t], dist, flag)
            sp, sp_sig, ok = smart_persistence_forecast(w_win, s_win, s_fut, nameplate)
            for t in range(chi):
                if ok:
                    table.add("smart_persistence", n, k2, ks[t], t + 1, regime.label, sp[t], Gaussian(sp[t], sp_sig[t]))
                else:
                    flag = "diurnal_fallback" if di_ok[t] else "unavailable"
                    table.add("smart_persistence", n, k2, ks[t], t + 1, regime.label, di[t], Degenerate(di[t]), flag)
            for name, model in (("ar", ar), ("switching_ar", sar)):
                if model is None:
                    continue
                m = model.for_regime(regime) if name == "switching_ar" else model
                lag0 = k2 - m.order + 1
                recent = w_day[lag0 + N : k2 + N + 1] - s_day[lag0 + N : k2 + N + 1]
                mean, var = ar_forecast(m, recent, chi)
                for t in range(chi):
                    mu = s_fut[t] + mean[t]
                    point = min(max(mu, 0.0), nameplate)
                    sd = max(math.sqrt(var[t]), sig_floor)
                    table.add(name, n, k2, ks[t], t + 1, regime.label, point, Gaussian(mu, sd))
    return table
