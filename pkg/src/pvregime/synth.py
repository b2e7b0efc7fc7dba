"""Seeded generator of synthetic PV days drawn from the regime models.

Regimes follow an explicit block schedule (the switching law itself is not
modelled): sunny blocks are ``s + N(0, sigma_s^2)``, overcast blocks a normal
around ``alpha s`` truncated to ``[0, s]``, and partly-cloudy blocks a Markov
chain over the HMM states with each sample drawn from its state's emission
law.  Truncated draws use the inverse CDF, so no rejection loop is needed.
"""
from __future__ import annotations

import datetime as dt
import json
from dataclasses import dataclass, field, fields
from functools import lru_cache

import numpy as np

from .clearsky import ClearSkyModel, fit_sunny, tercile_points
from .deconv import DiffuseFilter, hamming_init, toeplitz_apply
from .detect import Regime
from .distributions import TruncatedGaussian
from .regimes import DEFAULT_RATES, structural_mask
from .timeseries import PowerSeries

DEFAULT_N = 48
DEFAULT_DAYLIGHT = (-28, 28)
DEFAULT_PEAK = 3000.0


class ConfigError(ValueError):
    pass


@lru_cache(maxsize=8)
def _bell_coefficients(N: int, lo: int, hi: int, peak: float):
    k = np.arange(lo, hi)
    shape = peak * np.sin(np.pi * (k - lo + 0.5) / (hi - lo)) ** 1.3
    day = np.zeros(2 * N)
    day[k + N] = shape
    cp = tercile_points((lo, hi))
    model = fit_sunny([day], cp, (lo, hi))
    return tuple(model.coefficients), (cp.k1, cp.k2)


def default_clearsky(N: int = DEFAULT_N, daylight=DEFAULT_DAYLIGHT, peak: float = DEFAULT_PEAK) -> ClearSkyModel:
    """Smooth bell-shaped pattern on a 56-sample daylight window."""
    coef, cp = _bell_coefficients(N, daylight[0], daylight[1], float(peak))
    return ClearSkyModel(np.array(coef), cp, tuple(daylight))


def default_transition(M: int = 5) -> np.ndarray:
    """A generating chain with short clear gaps, filter-length cloud passages,
    persistent direct-beam spells and occasional edge spikes."""
    mask = structural_mask(M, 1)
    A = np.zeros(mask.shape)
    E, z0, zl, B, Ed = 0, 1, M, M + 1, M + 2
    A[E, [E, z0, B]] = [0.3, 0.5, 0.2]
    A[zl, [E, z0, Ed]] = [0.3, 0.6, 0.1]
    A[B, [E, B, Ed]] = [0.3, 0.5, 0.2]
    A[Ed, [E, B, Ed]] = [0.5, 0.3, 0.2]
    for j in range(1, M):
        A[j, j + 1] = 1.0
    assert not np.any(A[~mask])
    return A


@dataclass(frozen=True)
class Block:
    regime: Regime
    start: int  # first sample index of the block
    alpha: float | None = None


@dataclass
class ScenarioConfig:
    n_days: int = 10
    schedule: list[list[Block]] | None = None
    seed: int = 0
    sigma_s: float = 20.0
    sigma_oc: float = 40.0
    alpha_range: tuple[float, float] = (0.2, 0.8)
    regime_probs: tuple[float, float, float] = (0.3, 0.3, 0.4)
    switch_prob: float = 0.3
    clearsky: ClearSkyModel | None = None
    taps: tuple[float, ...] | None = None
    transition: np.ndarray | None = None
    rates: tuple[float, float, float] = DEFAULT_RATES
    N: int = DEFAULT_N
    sample_period: int = 15
    nameplate: float = 3740.0
    start_date: dt.date = dt.date(2016, 1, 1)

    def resolved_clearsky(self) -> ClearSkyModel:
        return self.clearsky if self.clearsky is not None else default_clearsky(self.N)

    def resolved_filter(self) -> DiffuseFilter:
        if self.taps is not None:
            return DiffuseFilter(np.asarray(self.taps, dtype=float))
        s = self.resolved_clearsky().profile(self.N)
        return hamming_init(5, float(s.max()) / 5)

    def resolved_transition(self) -> np.ndarray:
        if self.transition is not None:
            return np.asarray(self.transition, dtype=float)
        return default_transition(self.resolved_filter().M)

    def validate(self) -> None:
        if self.n_days < 1:
            raise ConfigError("n_days must be >= 1")
        if not (self.sigma_s >= 0 and self.sigma_oc >= 0):
            raise ConfigError("noise levels must be non-negative")
        lo, hi = self.resolved_clearsky().daylight
        if self.schedule is not None:
            if len(self.schedule) != self.n_days:
                raise ConfigError("schedule must list one block sequence per day")
            for n, blocks in enumerate(self.schedule):
                if not blocks:
                    raise ConfigError(f"day {n} has no blocks")
                starts = [b.start for b in blocks]
                if starts != sorted(starts) or starts[0] > lo:
                    raise ConfigError(f"day {n}: blocks must be sorted and the first must start by {lo}")
                if any(not lo <= s < hi for s in starts[1:]):
                    raise ConfigError(f"day {n}: switch times must fall inside daylight {lo}..{hi - 1}")
        A = self.resolved_transition()
        M = self.resolved_filter().M
        if A.shape != (M + 3, M + 3) or not np.allclose(A.sum(axis=1), 1.0):
            raise ConfigError("transition must be a row-stochastic (M+3)x(M+3) matrix")
        if np.any(A[~structural_mask(M, 1)] != 0):
            raise ConfigError("transition has mass on structurally forbidden entries")

    # -- JSON --------------------------------------------------------------
    @classmethod
    def from_dict(cls, d: dict) -> ScenarioConfig:
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown scenario keys: {', '.join(unknown)}")
        kw = {}
        for key in ("n_days", "seed", "switch_prob", "N", "sample_period"):
            if key in d:
                kw[key] = int(d[key]) if key != "switch_prob" else float(d[key])
        for key in ("sigma_s", "sigma_oc", "nameplate"):
            if key in d:
                kw[key] = float(d[key])
        if "alpha_range" in d:
            kw["alpha_range"] = tuple(float(x) for x in d["alpha_range"])
        if "regime_probs" in d:
            p = d["regime_probs"]
            kw["regime_probs"] = tuple(float(p[r.label]) for r in Regime) if isinstance(p, dict) else tuple(p)
        if "rates" in d:
            r = d["rates"]
            kw["rates"] = (r["lambda_z"], r["lambda_b"], r["lambda_e"]) if isinstance(r, dict) else tuple(r)
        if "clearsky" in d:
            kw["clearsky"] = ClearSkyModel.from_dict(d["clearsky"])
        if "taps" in d:
            kw["taps"] = tuple(float(x) for x in d["taps"])
        if "transition" in d:
            kw["transition"] = np.asarray(d["transition"], dtype=float)
        if "start_date" in d:
            kw["start_date"] = dt.date.fromisoformat(d["start_date"])
        if "schedule" in d and d["schedule"] is not None:
            kw["schedule"] = [
                [Block(Regime.parse(b["regime"]), int(b["start"]), b.get("alpha")) for b in day] for day in d["schedule"]
            ]
        try:
            cfg = cls(**kw)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc
        return cfg

    @classmethod
    def load(cls, path) -> ScenarioConfig:
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


@dataclass
class SyntheticData:
    series: PowerSeries
    clear: np.ndarray  # clear-sky pattern on the day grid
    regimes: np.ndarray  # (days, 2N) regime per sample, -1 at night
    states: np.ndarray  # (days, 2N) HMM state per sample, -1 outside partly-cloudy blocks
    alphas: list[list[float | None]] = field(default_factory=list)
    schedule: list[list[Block]] = field(default_factory=list)

    def labels_dict(self) -> dict:
        return {
            "regimes": self.regimes.tolist(),
            "states": self.states.tolist(),
            "alphas": self.alphas,
            "schedule": [[{"regime": b.regime.label, "start": b.start, "alpha": b.alpha} for b in day] for day in self.schedule],
        }


def random_schedule(n_days: int, rng: np.random.Generator, daylight, probs=(0.3, 0.3, 0.4), switch_prob=0.3, margin=12):
    """One or two regime blocks per day; switches land at least ``margin``
    samples inside daylight."""
    lo, hi = daylight
    probs = np.asarray(probs, dtype=float) / np.sum(probs)
    out = []
    for _ in range(n_days):
        first = Regime(int(rng.choice(3, p=probs)))
        blocks = [Block(first, lo)]
        if rng.uniform() < switch_prob and hi - lo > 2 * margin:
            others = [r for r in Regime if r != first]
            second = others[int(rng.integers(2))]
            blocks.append(Block(second, int(rng.integers(lo + margin, hi - margin))))
        out.append(blocks)
    return out


def _trunc_exp_draw(rng, rate, length, size=None):
    u = rng.uniform(size=size)
    return -np.log1p(-u * -np.expm1(-rate * length)) / rate


def sample_chain(A, n: int, rng: np.random.Generator, start: int | None = None) -> np.ndarray:
    A = np.asarray(A, dtype=float)
    ns = A.shape[0]
    cum = np.cumsum(A, axis=1)
    out = np.empty(n, dtype=np.int64)
    state = int(rng.integers(ns)) if start is None else int(start)
    for t in range(n):
        if t > 0:
            state = int(min(np.searchsorted(cum[state], rng.uniform(), side="right"), ns - 1))
        out[t] = state
    return out


def emit(states, s, taps, rates, eps_s, rng: np.random.Generator) -> np.ndarray:
    """Draw one power sample per state from the partly-cloudy emission laws."""
    states = np.asarray(states)
    s = np.asarray(s, dtype=float)
    taps = np.asarray(taps, dtype=float)
    M = taps.size
    lz, lb, le = rates
    w = np.empty(states.size)
    for t, (i, sv) in enumerate(zip(states, s)):
        if i == 0:
            w[t] = sv + rng.uniform(-eps_s, eps_s)
        elif i == M + 1:
            w[t] = sv - _trunc_exp_draw(rng, lb / sv, sv)
        elif i == M + 2:
            w[t] = sv + rng.exponential(sv / le)
        else:
            w[t] = sv - _trunc_exp_draw(rng, lz / taps[i - 1], sv)
    return w


def generate(config: ScenarioConfig) -> SyntheticData:
    config.validate()
    rng = np.random.default_rng(config.seed)
    cs = config.resolved_clearsky()
    N = config.N
    s = cs.profile(N)
    lo, hi = cs.daylight
    schedule = config.schedule
    if schedule is None:
        schedule = random_schedule(config.n_days, rng, cs.daylight, config.regime_probs, config.switch_prob)
    taps = config.resolved_filter().taps
    A = config.resolved_transition()
    eps_s = max(config.sigma_s, 1e-9)
    values = np.zeros((config.n_days, 2 * N))
    regimes = np.full(values.shape, -1, dtype=int)
    states = np.full(values.shape, -1, dtype=int)
    alphas = []
    for n, blocks in enumerate(schedule):
        day_alpha = []
        for b_idx, block in enumerate(blocks):
            k_start = max(block.start, lo)
            k_end = blocks[b_idx + 1].start if b_idx + 1 < len(blocks) else hi
            ks = np.arange(k_start, k_end)
            pos = ks + N
            sv = s[pos]
            regimes[n, pos] = int(block.regime)
            if block.regime == Regime.SUNNY:
                values[n, pos] = sv + (rng.normal(0.0, config.sigma_s, ks.size) if config.sigma_s > 0 else 0.0)
                day_alpha.append(None)
            elif block.regime == Regime.OVERCAST:
                alpha = block.alpha if block.alpha is not None else float(rng.uniform(*config.alpha_range))
                day_alpha.append(alpha)
                if config.sigma_oc == 0:
                    values[n, pos] = alpha * sv
                else:
                    u = rng.uniform(size=ks.size)
                    for j, (uu, v) in enumerate(zip(u, sv)):
                        if v <= 0:
                            values[n, pos[j]] = 0.0
                            continue
                        try:
                            values[n, pos[j]] = TruncatedGaussian(alpha * v, config.sigma_oc, 0.0, v).ppf(uu)
                        except ValueError as exc:
                            raise ConfigError(f"overcast truncation has no mass at day {n}, k={ks[j]}") from exc
            else:
                day_alpha.append(None)
                path = sample_chain(A, ks.size, rng)
                states[n, pos] = path
                values[n, pos] = emit(path, sv, taps, config.rates, eps_s, rng)
        alphas.append(day_alpha)
    series = PowerSeries.from_values(values, config.start_date, config.sample_period, config.nameplate)
    return SyntheticData(series, s, regimes, states, alphas, schedule)


def label_accuracy(decisions, truth) -> tuple[np.ndarray, np.ndarray]:
    """3x3 confusion matrix (rows = truth) and per-class accuracy (NaN if absent)."""
    decisions = [int(Regime(d)) if not isinstance(d, str) else int(Regime.parse(d)) for d in decisions]
    truth = [int(Regime(t)) if not isinstance(t, str) else int(Regime.parse(t)) for t in truth]
    if len(decisions) != len(truth):
        raise ValueError(f"misaligned streams: {len(decisions)} decisions vs {len(truth)} labels")
    cm = np.zeros((3, 3), dtype=int)
    for d, t in zip(decisions, truth):
        cm[t, d] += 1
    with np.errstate(invalid="ignore", divide="ignore"):
        acc = np.where(cm.sum(axis=1) > 0, np.diag(cm) / cm.sum(axis=1), np.nan)
    return cm, acc


# ------------------------------------------------------------------ deconvolution ground truth


@dataclass
class DeconvTruth:
    W: np.ndarray
    S: np.ndarray
    filter: DiffuseFilter
    z: np.ndarray
    a_b: np.ndarray
    a_e: np.ndarray


def deconv_days(
    n_days: int,
    s,
    filt: DiffuseFilter,
    rng: np.random.Generator,
    n_clouds: int = 3,
    n_beam: int = 2,
    n_edge: int = 2,
    noise: float = 0.0,
) -> DeconvTruth:
    """Days built from the attenuation model with isolated sparse events.

    Diffuse impulses, direct-beam dips and edge spikes are placed so their
    footprints do not overlap, which keeps the decomposition identifiable.
    """
    s = np.asarray(s, dtype=float)
    L = s.size
    M = filt.M
    W = np.empty((n_days, L))
    Z = np.zeros((n_days, L + M - 1))
    AB = np.zeros((n_days, L))
    AE = np.zeros((n_days, L))
    for n in range(n_days):
        taken = np.zeros(L, dtype=bool)
        taken[: M + 1] = taken[L - M - 1 :] = True
        slots = rng.permutation(np.arange(M + 1, L - 2 * M - 1))

        def place(width):
            for c in slots:
                if not taken[max(c - 1, 0) : c + width + 1].any():
                    taken[max(c - 1, 0) : c + width + 1] = True
                    return int(c)
            return None

        for _ in range(n_clouds):
            c = place(M)
            if c is not None:
                # output k = c .. c+M-1 is driven by z index c + M - 1
                Z[n, c + M - 1] = rng.uniform(0.3, 1.0)
        for _ in range(n_beam):
            c = place(1)
            if c is not None:
                AB[n, c] = rng.uniform(0.2, 0.6)
        for _ in range(n_edge):
            c = place(1)
            if c is not None:
                AE[n, c] = rng.uniform(0.05, 0.2)
        Tz = toeplitz_apply(filt, Z[n])
        under = s - s * AB[n] - Tz
        W[n] = np.where(AE[n] > 0, s + s * AE[n], under)
    if noise > 0:
        W = W + rng.normal(0.0, noise, W.shape)
    return DeconvTruth(W, np.tile(s, (n_days, 1)), filt, Z, AB, AE)
