"""Rolling-horizon point and probabilistic forecasts under regime persistence.

A window of recent samples is classified; its regime is assumed to hold over
the next ``chi`` samples.  Sunny windows forecast the clear-sky pattern,
overcast windows the attenuated pattern, and partly-cloudy windows follow the
most likely future state path of the HMM with parameters reconstructed from
the window.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .clearsky import ClearSkyModel, update_seasonal
from .detect import ClassificationError, Regime, RegimeDecision, Thresholds, classify
from .distributions import (
    Degenerate,
    Distribution,
    Gaussian,
    TruncatedExponential,
    TruncatedGaussian,
    UniformBand,
    to_spec,
)
from .regimes import PartlyCloudyHmm, StatePath, _log, best_path
from .timeseries import PowerSeries

log = logging.getLogger(__name__)

COVERAGE_LEVELS = tuple(round(0.1 * i, 1) for i in range(1, 10))  # b values


@dataclass(frozen=True)
class ForecastModels:
    clearsky: ClearSkyModel
    hmm: PartlyCloudyHmm
    thresholds: Thresholds
    nameplate: float = 3740.0


@dataclass(frozen=True)
class ForecastDistribution:
    step: int
    k: int
    regime: Regime
    point: float
    dist: Distribution
    state: int | None = None
    flag: str = ""

    def cdf(self, x):
        return self.dist.cdf(x)

    def interval(self, b: float) -> tuple[float, float]:
        """Interval of probability ``1 - b`` bracketing the point forecast."""
        return self.dist.interval(b, anchor=self.point)

    def crps(self, y: float) -> float:
        return self.dist.crps(y)


@dataclass(frozen=True)
class ForecastRun:
    day: int
    k1: int
    k2: int
    horizon: int
    decision: RegimeDecision | None
    steps: list[ForecastDistribution]

    @property
    def window_length(self) -> int:
        return self.k2 - self.k1 + 1

    @property
    def points(self) -> np.ndarray:
        return np.array([f.point for f in self.steps])


# ------------------------------------------------------------------ partly cloudy


def predict_states(hmm: PartlyCloudyHmm, last_state: int, chi: int) -> StatePath:
    """Most likely next ``chi`` states given the current one, transitions only.

    Max-product over the transition matrix starting from a point mass on
    ``last_state``; ties go to the lower state index at the earliest step.
    """
    if chi < 1:
        raise ValueError("chi must be >= 1")
    ns = hmm.n_states
    if not 0 <= last_state < ns:
        raise ValueError(f"state {last_state} outside 0..{ns - 1}")
    log_A = _log(hmm.transition)
    return best_path(log_A[last_state], log_A, np.zeros((chi, ns)))


@dataclass(frozen=True)
class Reconstruction:
    z_hat: float
    a_b: float
    a_e: float
    z_prior: bool


def estimate_parameters(hmm: PartlyCloudyHmm, w, s, path, alpha_hat: float) -> Reconstruction:
    """Single-cloud intensity and beam estimates from a decoded window.

    ``z`` is the non-negative least-squares scalar over every diffuse-state
    sample and active lag; with no diffuse evidence it falls back to the prior
    mean ``1 / lambda_z``.
    """
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    lz, lb, le = hmm.rates
    h = hmm.filter.taps
    num = den = 0.0
    for k, i in enumerate(np.asarray(path)):
        for j in hmm.lags[int(i)]:
            num += h[j] * (s[k] - w[k])
            den += h[j] ** 2
    if den > 0:
        z_hat, prior = max(num / den, 0.0), False
    else:
        z_hat, prior = 1.0 / lz, True
    a_b = 1.0 - alpha_hat if alpha_hat < 1.0 else 1.0 / lb
    a_e = alpha_hat - 1.0 if alpha_hat > 1.0 else 1.0 / le
    return Reconstruction(z_hat, a_b, a_e, prior)


def reconstruct_point(hmm: PartlyCloudyHmm, state: int, s: float, rec: Reconstruction, nameplate: float) -> float:
    if state == hmm.E:
        w = s
    elif state == hmm.B:
        w = s * (1.0 - rec.a_b)
    elif state == hmm.Ed:
        w = s * (1.0 + rec.a_e)
    else:
        w = s - hmm.gain(state) * rec.z_hat
    return float(min(max(w, 0.0), nameplate))


def state_distribution(hmm: PartlyCloudyHmm, state: int, s: float) -> Distribution:
    """Predictive law of one step in ``state``: the state's emission density."""
    lz, lb, le = hmm.rates
    if state == hmm.E:
        return UniformBand(s, hmm.epsilon_s)
    if state == hmm.B:
        return TruncatedExponential(s, lb / s, s, -1)
    if state == hmm.Ed:
        return TruncatedExponential(s, le / s, math.inf, +1)
    g = hmm.gain(state)
    if g <= 0:
        return Degenerate(s)
    return TruncatedExponential(s, lz / g, s, -1)


# ------------------------------------------------------------------ windows


def _beyond(k: int, s: float, model: ClearSkyModel, floor: float) -> bool:
    lo, hi = model.daylight
    return not (lo <= k < hi) or not s > floor


def forecast_window(
    w_window,
    k2: int,
    models: ForecastModels,
    chi: int = 12,
    day: int = 0,
    decision: RegimeDecision | None = None,
    s_day: np.ndarray | None = None,
) -> ForecastRun:
    """Forecast ``chi`` steps after a window ending at sample ``k2``.

    ``w_window`` holds samples ``k2 - len + 1 .. k2``.  ``s_day`` is the
    clear-sky pattern over the whole day grid (computed when omitted).
    Steps outside the daylight support forecast 0 with a point-mass CDF and
    carry the flag ``"beyond_daylight"``.
    """
    if chi < 1:
        raise ValueError("chi must be >= 1")
    w_window = np.asarray(w_window, dtype=float)
    n = w_window.size
    k1 = k2 - n + 1
    N = _grid_half(models, s_day)
    if s_day is None:
        s_day = models.clearsky.profile(N)
    s_win = s_day[k1 + N : k2 + N + 1]
    th = models.thresholds
    if decision is None:
        decision = classify(w_window, s_win, th, models.hmm)
    hmm = models.hmm
    rec = None
    future = None
    if decision.regime == Regime.PARTLY_CLOUDY:
        used = decision.used
        path = decision.state_path.states
        rec = estimate_parameters(hmm, w_window[used], s_win[used], path, decision.alpha_hat)
        future = predict_states(hmm, int(path[-1]), chi).states
    steps = []
    for t in range(1, chi + 1):
        k = k2 + t
        s = float(s_day[k + N]) if k < N else 0.0
        if k >= N or _beyond(k, s, models.clearsky, th.s_floor):
            steps.append(ForecastDistribution(t, k, decision.regime, 0.0, Degenerate(0.0), None, "beyond_daylight"))
            continue
        if decision.regime == Regime.SUNNY:
            point = min(s, models.nameplate)
            steps.append(ForecastDistribution(t, k, decision.regime, point, Gaussian(s, th.sigma_s)))
        elif decision.regime == Regime.OVERCAST:
            point = min(decision.alpha_hat * s, models.nameplate)
            dist = TruncatedGaussian(decision.alpha_hat * s, th.sigma_oc, 0.0, s)
            steps.append(ForecastDistribution(t, k, decision.regime, point, dist))
        else:
            state = int(future[t - 1])
            point = reconstruct_point(hmm, state, s, rec, models.nameplate)
            flag = "z_prior" if rec.z_prior and hmm.is_diffuse(state) else ""
            steps.append(
                ForecastDistribution(t, k, decision.regime, point, state_distribution(hmm, state, s), state, flag)
            )
    return ForecastRun(day, k1, k2, chi, decision, steps)


def _grid_half(models: ForecastModels, s_day) -> int:
    if s_day is not None:
        return len(s_day) // 2
    lo, hi = models.clearsky.daylight
    return max(-lo, hi)


# ------------------------------------------------------------------ rolling


@dataclass
class ForecastTable:
    """Flat record of every (day, origin, step) forecast."""

    method: list[str] = field(default_factory=list)
    day: list[int] = field(default_factory=list)
    origin: list[int] = field(default_factory=list)
    k: list[int] = field(default_factory=list)
    k_tau: list[int] = field(default_factory=list)
    regime: list[str] = field(default_factory=list)
    point: list[float] = field(default_factory=list)
    dists: list[Distribution] = field(default_factory=list)
    flag: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.point)

    def add(self, method, day, origin, k, k_tau, regime, point, dist, flag=""):
        self.method.append(method)
        self.day.append(int(day))
        self.origin.append(int(origin))
        self.k.append(int(k))
        self.k_tau.append(int(k_tau))
        self.regime.append(regime)
        self.point.append(float(point))
        self.dists.append(dist)
        self.flag.append(flag)

    def extend(self, other: ForecastTable) -> None:
        for name in ("method", "day", "origin", "k", "k_tau", "regime", "point", "dists", "flag"):
            getattr(self, name).extend(getattr(other, name))

    def select(self, mask) -> ForecastTable:
        idx = np.flatnonzero(mask)
        out = ForecastTable()
        for name in ("method", "day", "origin", "k", "k_tau", "regime", "point", "dists", "flag"):
            col = getattr(self, name)
            setattr(out, name, [col[i] for i in idx])
        return out

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "day": np.asarray(self.day, dtype=int),
            "k": np.asarray(self.k, dtype=int),
            "k_tau": np.asarray(self.k_tau, dtype=int),
            "point": np.asarray(self.point, dtype=float),
        }

    def methods(self) -> list[str]:
        return sorted(set(self.method))

    def rows(self, levels=(0.1, 0.5)):
        """CSV rows: day,k,k_tau,regime,point_w, interval pairs, method, dist."""
        for i in range(len(self)):
            d, p = self.dists[i], self.point[i]
            ivs = []
            for b in levels:
                lo, hi = d.interval(b, anchor=p)
                ivs += [lo, hi]
            yield [self.day[i], self.k[i], self.k_tau[i], self.regime[i], p, *ivs, self.method[i], to_spec(d)]


def rolling_evaluate(
    series: PowerSeries,
    models: ForecastModels,
    window: int = 4,
    chi: int = 12,
    days=None,
    seasonal_gamma: float | None = None,
    method: str = "proposed",
    decisions: list | None = None,
) -> ForecastTable:
    """Slide a ``window``-sample window one sample at a time through each day's
    daylight and forecast ``chi`` steps from every position.

    Only origins whose full horizon fits inside daylight are used.  Days with
    too little daylight are skipped with a warning.  With ``seasonal_gamma``
    set, each day whose every window was classified sunny is blended into the
    clear-sky model before the next day.  When ``decisions`` is a list it
    receives ``(day, k1, k2, RegimeDecision)`` tuples.
    """
    if window < 2:
        raise ValueError("window must hold at least 2 samples")
    table = ForecastTable()
    N = series.N
    days = range(series.n_days) if days is None else days
    for n in days:
        s_day = models.clearsky.profile(N)
        lo, hi = models.clearsky.daylight
        if hi - lo < window + chi:
            log.warning("day %d: daylight too short for window %d + horizon %d; skipped", n, window, chi)
            continue
        w_day = series.values[n]
        all_sunny = True
        for k2 in range(lo + window - 1, hi - chi):
            k1 = k2 - window + 1
            w_win = w_day[k1 + N : k2 + N + 1]
            try:
                decision = classify(w_win, s_day[k1 + N : k2 + N + 1], models.thresholds, models.hmm)
            except ClassificationError as exc:
                log.debug("day %d window (%d, %d) skipped: %s", n, k1, k2, exc)
                all_sunny = False
                continue
            if decisions is not None:
                decisions.append((n, k1, k2, decision))
            all_sunny &= decision.regime == Regime.SUNNY
            run = forecast_window(w_win, k2, models, chi, n, decision, s_day)
            for f in run.steps:
                table.add(method, n, k2, f.k, f.step, f.regime.label, f.point, f.dist, f.flag)
        if seasonal_gamma and all_sunny:
            new_cs, status = update_seasonal(models.clearsky, w_day, seasonal_gamma)
            if status != "failed":
                models = ForecastModels(new_cs, models.hmm, models.thresholds, models.nameplate)
    return table
