"""Online classification of a window into sunny, overcast or partly cloudy."""
from __future__ import annotations

import enum
import json
from dataclasses import dataclass

import numpy as np

from .regimes import PartlyCloudyHmm, StatePath, viterbi_decode


class Regime(enum.IntEnum):
    SUNNY = 0
    OVERCAST = 1
    PARTLY_CLOUDY = 2

    @property
    def label(self) -> str:
        return {0: "Sunny", 1: "Overcast", 2: "PartlyCloudy"}[int(self)]

    @classmethod
    def parse(cls, text: str) -> Regime:
        for r in cls:
            if text in (r.label, r.name, str(int(r))):
                return r
        raise ValueError(f"unknown regime {text!r}")


class ClassificationError(ValueError):
    pass


@dataclass(frozen=True)
class Thresholds:
    sigma_s: float
    sigma_oc: float
    mu: float = 3.0
    mu_oc: float = 3.0
    alpha_max: float = 0.9
    s_floor: float = 1.0

    def __post_init__(self):
        if not (self.sigma_s > 0 and self.sigma_oc > 0):
            raise ValueError("sigma_s and sigma_oc must be positive")
        if not (self.mu > 1 and self.mu_oc > 0):
            raise ValueError("mu must exceed 1 and mu_oc must be positive")

    def scaled(self, c: float) -> Thresholds:
        return Thresholds(self.sigma_s * c, self.sigma_oc * c, self.mu, self.mu_oc, self.alpha_max, self.s_floor * c)


@dataclass(frozen=True)
class RegimeDecision:
    regime: Regime
    alpha_hat: float
    sse: float
    state_path: StatePath | None = None
    used: np.ndarray | None = None  # mask of window samples that entered the test

    def __post_init__(self):
        if self.regime == Regime.OVERCAST and not (0.0 < self.alpha_hat <= 1.0):
            raise ValueError(f"overcast decision needs alpha in (0, 1], got {self.alpha_hat}")
        if self.regime == Regime.PARTLY_CLOUDY and (self.state_path is None or len(self.state_path) == 0):
            raise ValueError("partly cloudy decision needs a state path")

    def to_record(self, day: int, k1: int, k2: int) -> dict:
        return {
            "day": day,
            "k1": k1,
            "k2": k2,
            "regime": self.regime.label,
            "alpha": float(self.alpha_hat),
            "sse": float(self.sse),
        }


def _usable(w, s, floor):
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    return np.isfinite(w) & np.isfinite(s) & (s > floor)


def estimate_alpha(w, s, floor: float = 0.0) -> float:
    """Least-squares attenuation ``sum(w s) / sum(s^2)``, clipped below at 0."""
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    ok = _usable(w, s, floor)
    den = float(s[ok] @ s[ok]) if ok.any() else 0.0
    if den <= 0:
        raise ClassificationError("no usable samples to estimate alpha")
    return max(float(w[ok] @ s[ok]) / den, 0.0)


def classify(w, s, thresholds: Thresholds, hmm: PartlyCloudyHmm | None = None) -> RegimeDecision:
    """Sunny if the window hugs the pattern, overcast if a single attenuation
    explains it, otherwise partly cloudy with the decoded state path.

    Samples where the pattern is at or below ``thresholds.s_floor`` or the
    observation is missing are left out of every statistic.
    """
    w = np.asarray(w, dtype=float)
    s = np.asarray(s, dtype=float)
    if w.shape != s.shape or w.ndim != 1:
        raise ValueError("w and s must be 1-D arrays of equal length")
    if w.size < 2:
        raise ClassificationError("window needs at least 2 samples")
    ok = _usable(w, s, thresholds.s_floor)
    n = int(ok.sum())
    if n == 0:
        raise ClassificationError("every sample in the window was excluded")
    wu, su = w[ok], s[ok]
    err = float(((wu - su) ** 2).sum())
    if err <= n * (thresholds.mu * thresholds.sigma_s) ** 2:
        return RegimeDecision(Regime.SUNNY, 1.0, err, None, ok)
    alpha = estimate_alpha(wu, su)
    sse = float(((wu - alpha * su) ** 2).sum())
    if sse <= n * (thresholds.mu_oc * thresholds.sigma_oc) ** 2 and 0.0 < alpha <= thresholds.alpha_max:
        return RegimeDecision(Regime.OVERCAST, alpha, sse, None, ok)
    if hmm is None:
        raise ValueError("a partly-cloudy window needs an HMM to decode")
    path = viterbi_decode(hmm, wu, su)
    return RegimeDecision(Regime.PARTLY_CLOUDY, alpha, sse, path, ok)


def write_decision_log(records, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
