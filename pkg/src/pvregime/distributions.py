"""Scalar predictive distributions in watts.

Every class exposes ``cdf``, ``ppf``, ``interval`` and ``crps``.  CRPS uses
closed forms where they are short (point mass, Gaussian, uniform band,
truncated exponential) and piecewise Gauss-Legendre otherwise.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.special import log_ndtr, ndtr, ndtri

_SQRT_PI = math.sqrt(math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)
_TAIL = 1e-12
_GL_X, _GL_W = np.polynomial.legendre.leggauss(24)


def log_normal_mass(a, b):
    """``log(Phi(b) - Phi(a))`` for ``a < b``, stable in both tails."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    # reflect so the subtraction happens in the lower tail
    flip = a > 0
    lo = np.where(flip, -b, a)
    hi = np.where(flip, -a, b)
    lhi = log_ndtr(hi)
    llo = log_ndtr(lo)
    with np.errstate(divide="ignore"):
        return lhi + np.log1p(-np.exp(llo - lhi))


class Distribution:
    lo = -math.inf
    hi = math.inf

    def cdf(self, x):
        raise NotImplementedError

    def ppf(self, p):
        raise NotImplementedError

    def crps(self, y) -> float:
        raise NotImplementedError

    def mean(self) -> float:
        raise NotImplementedError

    def sample(self, rng: np.random.Generator, size=None):
        return self.ppf(rng.uniform(size=size))

    def interval(self, b: float, anchor: float | None = None) -> tuple[float, float]:
        """Interval with probability ``1 - b`` that contains ``anchor``.

        The lower tail mass is ``F(anchor) - (1 - b) / 2`` clipped into
        ``[0, b]``, so the interval is equal-tailed whenever the anchor is the
        median and still brackets an off-median anchor otherwise.  Infinite
        support edges are pulled in by 1e-12 of probability.
        """
        if not 0.0 <= b <= 1.0:
            raise ValueError("b must lie in [0, 1]")
        pa = 0.5 if anchor is None else float(self.cdf(anchor))
        lo_min = 0.0 if math.isfinite(self.lo) else _TAIL
        hi_max = 1.0 if math.isfinite(self.hi) else 1.0 - _TAIL
        pl = min(max(pa - (1.0 - b) / 2.0, lo_min), b)
        pu = pl + 1.0 - b
        if pu > hi_max:
            pu = hi_max
            pl = max(pu - (1.0 - b), lo_min)
        return float(self.ppf(pl)), float(self.ppf(pu))


class Degenerate(Distribution):
    def __init__(self, value: float):
        self.value = float(value)
        self.lo = self.hi = self.value

    def cdf(self, x):
        return np.where(np.asarray(x, dtype=float) >= self.value, 1.0, 0.0)

    def ppf(self, p):
        return np.full(np.shape(p), self.value) if np.ndim(p) else self.value

    def interval(self, b, anchor=None):
        return self.value, self.value

    def crps(self, y):
        return abs(self.value - float(y))

    def mean(self):
        return self.value


class Gaussian(Distribution):
    def __init__(self, mu: float, sigma: float):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.mu, self.sigma = float(mu), float(sigma)

    def cdf(self, x):
        return ndtr((np.asarray(x, dtype=float) - self.mu) / self.sigma)

    def ppf(self, p):
        return self.mu + self.sigma * ndtri(p)

    def crps(self, y):
        z = (float(y) - self.mu) / self.sigma
        pdf = _INV_SQRT_2PI * math.exp(-0.5 * z * z)
        return self.sigma * (z * (2.0 * float(ndtr(z)) - 1.0) + 2.0 * pdf - 1.0 / _SQRT_PI)

    def mean(self):
        return self.mu


class TruncatedGaussian(Distribution):
    """Normal ``(mu, sigma)`` restricted to ``[lo, hi]``."""

    def __init__(self, mu: float, sigma: float, lo: float, hi: float):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        if not lo < hi:
            raise ValueError("need lo < hi")
        self.mu, self.sigma, self.lo, self.hi = float(mu), float(sigma), float(lo), float(hi)
        self._a = (self.lo - self.mu) / self.sigma
        self._b = (self.hi - self.mu) / self.sigma
        self._logmass = float(log_normal_mass(self._a, self._b))
        if not math.isfinite(self._logmass):
            raise ValueError("truncation interval carries no probability mass")

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (x - self.mu) / self.sigma
        out = -0.5 * z * z - math.log(self.sigma) - 0.5 * math.log(2 * math.pi) - self._logmass
        return np.where((x >= self.lo) & (x <= self.hi), out, -np.inf)

    def cdf(self, x):
        x = np.asarray(x, dtype=float)
        z = (np.clip(x, self.lo, self.hi) - self.mu) / self.sigma
        with np.errstate(divide="ignore"):
            val = np.exp(log_normal_mass(self._a, np.maximum(z, self._a)) - self._logmass)
        val = np.where(z <= self._a, 0.0, val)
        return np.clip(val, 0.0, 1.0)

    def ppf(self, p):
        p = np.clip(np.asarray(p, dtype=float), 0.0, 1.0)
        mass = math.exp(self._logmass)
        if self._a > 0:
            # upper tail: work with survival mass to keep precision
            top = float(ndtr(-self._a))
            q = top - p * mass
            z = -ndtri(np.clip(q, 0.0, 1.0))
        else:
            base = float(ndtr(self._a))
            z = ndtri(np.clip(base + p * mass, 0.0, 1.0))
        out = np.clip(self.mu + self.sigma * z, self.lo, self.hi)
        return out if out.ndim else float(out)

    def mean(self):
        a, b = self._a, self._b
        pa = _INV_SQRT_2PI * math.exp(-0.5 * a * a)
        pb = _INV_SQRT_2PI * math.exp(-0.5 * b * b)
        return self.mu + self.sigma * (pa - pb) / math.exp(self._logmass)

    def crps(self, y):
        y = float(y)
        edges = [self.lo, self.hi, y] + [self.mu + c * self.sigma for c in (-8, -4, -2, -1, 0, 1, 2, 4, 8)]
        cuts = np.unique(np.clip(edges, self.lo, self.hi))
        a, b = cuts[:-1], cuts[1:]
        half = 0.5 * (b - a)
        x = (0.5 * (a + b))[:, None] + half[:, None] * _GL_X[None, :]
        f = self.cdf(x) - (x >= y)
        inner = float((half[:, None] * _GL_W[None, :] * f * f).sum())
        return inner + max(self.lo - y, 0.0) + max(y - self.hi, 0.0)


class UniformBand(Distribution):
    def __init__(self, center: float, half_width: float):
        if not half_width > 0:
            raise ValueError("half-width must be positive")
        self.center, self.half = float(center), float(half_width)
        self.lo, self.hi = self.center - self.half, self.center + self.half

    def cdf(self, x):
        return np.clip((np.asarray(x, dtype=float) - self.lo) / (2 * self.half), 0.0, 1.0)

    def ppf(self, p):
        return self.lo + 2 * self.half * np.clip(p, 0.0, 1.0)

    def crps(self, y):
        y = float(y)
        width = 2 * self.half
        if y < self.lo or y > self.hi:
            dev = abs(y - self.center)
        else:
            dev = ((y - self.lo) ** 2 + (self.hi - y) ** 2) / (2 * width)
        return dev - width / 6.0

    def mean(self):
        return self.center


class TruncatedExponential(Distribution):
    """``w = origin - X`` (``direction=-1``) or ``origin + X`` (``+1``).

    ``X`` is exponential with ``rate`` truncated to ``[0, length]``;
    ``length`` may be infinite.
    """

    def __init__(self, origin: float, rate: float, length: float = math.inf, direction: int = -1):
        if not rate > 0:
            raise ValueError("rate must be positive")
        if not length > 0:
            raise ValueError("length must be positive")
        if direction not in (-1, 1):
            raise ValueError("direction must be -1 or +1")
        self.origin, self.rate, self.length, self.direction = float(origin), float(rate), float(length), direction
        self._e = math.exp(-self.rate * self.length)
        self._Z = -math.expm1(-self.rate * self.length)
        if direction < 0:
            self.lo, self.hi = self.origin - self.length, self.origin
        else:
            self.lo, self.hi = self.origin, self.origin + self.length

    def _x_cdf(self, x):
        x = np.clip(x, 0.0, self.length)
        return -np.expm1(-self.rate * x) / self._Z

    def _x_ppf(self, q):
        q = np.clip(q, 0.0, 1.0)
        with np.errstate(divide="ignore"):
            x = -np.log1p(-q * self._Z) / self.rate
        # Z rounds to 1 for long supports; the top quantile is still the edge
        return np.minimum(x, self.length)

    def cdf(self, w):
        w = np.asarray(w, dtype=float)
        if self.direction > 0:
            return np.where(w < self.origin, 0.0, self._x_cdf(w - self.origin))
        return np.where(w >= self.origin, 1.0, 1.0 - self._x_cdf(self.origin - w))

    def ppf(self, p):
        p = np.asarray(p, dtype=float)
        if self.direction > 0:
            out = self.origin + self._x_ppf(p)
        else:
            out = self.origin - self._x_ppf(1.0 - p)
        return out if out.ndim else float(out)

    def mean(self):
        tail = 0.0 if math.isinf(self.length) else self.length * self._e / self._Z
        return self.origin + self.direction * (1.0 / self.rate - tail)

    def crps(self, y):
        # CRPS is invariant under the reflection w -> origin - w, so score in X space
        t = self.direction * (float(y) - self.origin)
        r, c, e, Z = self.rate, self.length, self._e, self._Z
        ec = 0.0 if math.isinf(c) else e * c
        mean_x = 1.0 / r - ec / Z
        if t <= 0:
            dev = mean_x - t
        elif t >= c:
            dev = t - mean_x
        else:
            ey = math.exp(-r * t)
            below = (t + math.expm1(-r * t) / r) / Z
            rest = 0.0 if math.isinf(c) else e * (c - t)
            above = (-rest + (ey - e) / r) / Z
            dev = below + above
        spread = 2.0 * ((1.0 - e * e) / (2.0 * r) - ec) / (Z * Z)
        return dev - 0.5 * spread


def to_spec(d: Distribution) -> str:
    """Compact text form, round-trippable through :func:`from_spec`."""
    if isinstance(d, Degenerate):
        parts = ["point", d.value]
    elif isinstance(d, Gaussian):
        parts = ["gauss", d.mu, d.sigma]
    elif isinstance(d, TruncatedGaussian):
        parts = ["tgauss", d.mu, d.sigma, d.lo, d.hi]
    elif isinstance(d, UniformBand):
        parts = ["band", d.center, d.half]
    elif isinstance(d, TruncatedExponential):
        parts = ["texp", d.origin, d.rate, d.length, d.direction]
    else:
        raise TypeError(f"no spec for {type(d).__name__}")
    return parts[0] + ":" + ":".join(repr(float(x)) if not isinstance(x, int) else str(x) for x in parts[1:])


def from_spec(text: str) -> Distribution:
    kind, *args = text.strip().split(":")
    try:
        if kind == "texp":
            return TruncatedExponential(float(args[0]), float(args[1]), float(args[2]), int(args[3]))
        cls = {"point": Degenerate, "gauss": Gaussian, "tgauss": TruncatedGaussian, "band": UniformBand}[kind]
        return cls(*(float(a) for a in args))
    except (KeyError, IndexError, TypeError) as exc:
        raise ValueError(f"bad distribution spec {text!r}") from exc
