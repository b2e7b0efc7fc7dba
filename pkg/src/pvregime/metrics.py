"""Deterministic and probabilistic forecast scores, aggregated per horizon step."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.integrate import quad

from .distributions import Distribution
from .forecast import COVERAGE_LEVELS, ForecastTable
from .timeseries import PowerSeries


class NonMonotoneCdfError(ValueError):
    pass


def mape(actual, forecast, nameplate: float = 3740.0, floor_rel: float = 1e-2):
    """Mean of ``|w - w_hat| / w`` over samples with ``w > floor_rel * nameplate``.

    Returns ``(value, n_excluded)``; ``value`` is NaN when nothing qualifies.
    """
    w = np.asarray(actual, dtype=float).ravel()
    f = np.asarray(forecast, dtype=float).ravel()
    ok = np.isfinite(w) & np.isfinite(f)
    keep = ok & (w > floor_rel * nameplate)
    excluded = int(ok.sum() - keep.sum())
    if not keep.any():
        return math.nan, excluded
    return float(np.mean(np.abs(w[keep] - f[keep]) / w[keep])), excluded


def rmse(actual, forecast) -> float:
    w = np.asarray(actual, dtype=float).ravel()
    f = np.asarray(forecast, dtype=float).ravel()
    ok = np.isfinite(w) & np.isfinite(f)
    if not ok.any():
        raise ValueError("rmse needs at least one sample")
    e = w[ok] - f[ok]
    return float(np.sqrt(np.mean(e * e)))


def nmse(actual, fitted) -> float:
    w = np.asarray(actual, dtype=float)
    f = np.asarray(fitted, dtype=float)
    ok = np.isfinite(w) & np.isfinite(f)
    den = float(w[ok] @ w[ok])
    return float(((w[ok] - f[ok]) ** 2).sum()) / den if den > 0 else 0.0


def crps(observation: float, cdf, upper: float | None = None, lower: float = 0.0) -> float:
    """CRPS of one observation.

    ``cdf`` is a :class:`Distribution` (closed form or its own quadrature) or a
    plain callable, which is integrated adaptively over ``[lower, upper]``
    after a monotonicity check on a dense grid.
    """
    if isinstance(cdf, Distribution):
        return float(cdf.crps(observation))
    y = float(observation)
    if upper is None:
        upper = max(y, 1.0) * 1.5
    grid = np.linspace(lower, upper, 2001)
    vals = np.array([float(cdf(x)) for x in grid])
    if np.any(np.diff(vals) < -1e-12) or vals.min() < -1e-12 or vals.max() > 1 + 1e-12:
        raise NonMonotoneCdfError("CDF is not a non-decreasing function into [0, 1]")
    pts = [p for p in (y,) if lower < p < upper]
    val, _ = quad(lambda x: (float(cdf(x)) - (x >= y)) ** 2, lower, upper, points=pts or None, limit=400, epsabs=1e-4)
    return float(val) + max(lower - y, 0.0)


def reliability(observations, lower, upper, b: float):
    """Empirical coverage ``R`` and its deviation ``R - (1 - b)``."""
    w = np.asarray(observations, dtype=float)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    inside = (w >= lo) & (w <= hi)
    R = float(inside.mean()) if inside.size else math.nan
    return R, R - (1.0 - b)


def interval_score(observation, lower, upper, b: float):
    """``-2 b (U - L)``, minus ``4 x`` the distance when the observation falls outside."""
    w = np.asarray(observation, dtype=float)
    lo = np.asarray(lower, dtype=float)
    hi = np.asarray(upper, dtype=float)
    if np.any(lo > hi):
        raise ValueError("interval with lower > upper")
    out = -2.0 * b * (hi - lo)
    out = out - 4.0 * np.maximum(lo - w, 0.0) - 4.0 * np.maximum(w - hi, 0.0)
    return out if out.ndim else float(out)


def forecast_skill(rmse_method, rmse_persistence):
    m = np.asarray(rmse_method, dtype=float)
    p = np.asarray(rmse_persistence, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(p > 0, 1.0 - m / p, np.nan)
    return out if out.ndim else float(out)


def diurnal_profile(actual, forecast, minutes, nameplate: float = 3740.0) -> dict[int, float]:
    """MAPE bucketed by hour of day; empty buckets come back as NaN."""
    w = np.asarray(actual, dtype=float)
    f = np.asarray(forecast, dtype=float)
    hours = np.asarray(minutes) // 60
    out = {}
    for h in np.unique(hours):
        m = hours == h
        out[int(h)] = mape(w[m], f[m], nameplate)[0]
    return out


# ------------------------------------------------------------------ tables


@dataclass
class ScoreTable:
    method: str
    k_tau: np.ndarray
    n: np.ndarray
    rmse: np.ndarray
    mape: np.ndarray
    mape_excluded: np.ndarray
    crps: np.ndarray
    reliability: dict[float, np.ndarray]
    score: dict[float, np.ndarray]
    nameplate: float = 3740.0
    skill: np.ndarray | None = None
    profile: dict[int, float] = field(default_factory=dict)

    def reliability_dev(self, b: float) -> np.ndarray:
        return self.reliability[b] - (1.0 - b)

    def r_avg(self, b: float) -> float:
        return float(np.mean(self.reliability[b]))

    def score_avg(self, b: float, normalized: bool = False) -> float:
        v = float(np.mean(self.score[b]))
        return v / self.nameplate if normalized else v

    def mean_normalized_score(self) -> float:
        return float(np.mean([self.score_avg(b, True) for b in self.score]))

    def summary(self) -> dict:
        def arr(x):
            return [None if not np.isfinite(v) else float(v) for v in np.asarray(x, dtype=float)]

        out = {
            "method": self.method,
            "k_tau": [int(k) for k in self.k_tau],
            "n": [int(k) for k in self.n],
            "rmse": arr(self.rmse),
            "mape": arr(self.mape),
            "crps": arr(self.crps),
            "skill": arr(self.skill) if self.skill is not None else None,
            "reliability": {f"{b:.1f}": arr(v) for b, v in self.reliability.items()},
            "score": {f"{b:.1f}": arr(v) for b, v in self.score.items()},
            "score_avg_normalized": {f"{b:.1f}": self.score_avg(b, True) for b in self.score},
            "reliability_avg": {f"{b:.1f}": self.r_avg(b) for b in self.reliability},
        }
        return out


def attach_actuals(table: ForecastTable, series: PowerSeries) -> np.ndarray:
    N = series.N
    day = np.asarray(table.day, dtype=int)
    k = np.asarray(table.k, dtype=int)
    inside = (day >= 0) & (day < series.n_days) & (k >= -N) & (k < N)
    out = np.full(day.shape, np.nan)
    out[inside] = series.values[day[inside], k[inside] + N]
    return out


def score_table(
    table: ForecastTable,
    series: PowerSeries,
    method: str | None = None,
    levels=COVERAGE_LEVELS,
    nameplate: float | None = None,
) -> ScoreTable:
    """Per-horizon scores for one method's records against observed power.

    Records whose observation or point forecast is missing are skipped.
    """
    nameplate = series.nameplate if nameplate is None else nameplate
    if method is not None:
        table = table.select(np.asarray(table.method) == method)
    methods = table.methods()
    if len(methods) != 1:
        raise ValueError(f"score_table needs exactly one method, got {methods}")
    w = attach_actuals(table, series)
    pts = np.asarray(table.point, dtype=float)
    ok = np.isfinite(w) & np.isfinite(pts)
    kt = np.asarray(table.k_tau, dtype=int)
    steps = np.unique(kt[ok])
    n_arr, r_arr, m_arr, ex_arr, c_arr = [], [], [], [], []
    rel = {b: [] for b in levels}
    sc = {b: [] for b in levels}
    for t in steps:
        idx = np.flatnonzero(ok & (kt == t))
        wt, pt = w[idx], pts[idx]
        n_arr.append(idx.size)
        r_arr.append(rmse(wt, pt))
        mv, ex = mape(wt, pt, nameplate)
        m_arr.append(mv)
        ex_arr.append(ex)
        c_arr.append(float(np.mean([table.dists[i].crps(w[i]) for i in idx])))
        for b in levels:
            bounds = np.array([table.dists[i].interval(b, anchor=pts[i]) for i in idx])
            rel[b].append(reliability(wt, bounds[:, 0], bounds[:, 1], b)[0])
            sc[b].append(float(np.mean(interval_score(wt, bounds[:, 0], bounds[:, 1], b))))
    minutes = (np.asarray(table.k)[ok] + series.N) * series.sample_period
    return ScoreTable(
        methods[0],
        steps,
        np.array(n_arr),
        np.array(r_arr),
        np.array(m_arr),
        np.array(ex_arr),
        np.array(c_arr),
        {b: np.array(v) for b, v in rel.items()},
        {b: np.array(v) for b, v in sc.items()},
        nameplate,
        profile=diurnal_profile(w[ok], pts[ok], minutes, nameplate),
    )


def evaluate_all(table: ForecastTable, series: PowerSeries, reference: str = "smart_persistence", levels=COVERAGE_LEVELS):
    """Score every method in ``table``; skill is relative to ``reference``."""
    scores = {m: score_table(table, series, m, levels) for m in table.methods()}
    if reference in scores:
        ref = scores[reference]
        for st in scores.values():
            if np.array_equal(st.k_tau, ref.k_tau):
                st.skill = forecast_skill(st.rmse, ref.rmse)
    return scores


def write_report(scores: dict[str, ScoreTable], out_dir) -> None:
    """``metrics.csv`` (one row per method and step) plus ``summary.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    levels = None
    with (out / "metrics.csv").open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        for name in sorted(scores):
            st = scores[name]
            if levels is None:
                levels = sorted(st.score)
                wr.writerow(
                    ["method", "k_tau", "n", "rmse_w", "mape", "crps_w", "skill"]
                    + [f"R_{b:.1f}" for b in levels]
                    + [f"score_{b:.1f}" for b in levels]
                )
            for i, t in enumerate(st.k_tau):
                skill = "" if st.skill is None else f"{st.skill[i]:.6g}"
                wr.writerow(
                    [name, int(t), int(st.n[i]), f"{st.rmse[i]:.6g}", f"{st.mape[i]:.6g}", f"{st.crps[i]:.6g}", skill]
                    + [f"{st.reliability[b][i]:.6g}" for b in levels]
                    + [f"{st.score[b][i]:.6g}" for b in levels]
                )
    summary = {name: scores[name].summary() for name in sorted(scores)}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n", encoding="utf-8")
