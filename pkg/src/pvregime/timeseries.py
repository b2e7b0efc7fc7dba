"""Sampled PV power: the canonical data model and CSV ingestion.

A :class:`PowerSeries` holds one row of ``2N`` samples per calendar day.  Sample
``k`` runs over ``-N .. N-1`` so that ``k = 0`` falls at noon; row position
``p = k + N`` corresponds to time-of-day ``p * sample_period`` minutes.
Missing samples are stored as NaN and are never interpolated.
"""
from __future__ import annotations

import csv
import datetime as dt
import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

MINUTES_PER_DAY = 1440


class IngestError(ValueError):
    """Base class for problems reading an external power file."""


class ParseError(IngestError):
    def __init__(self, line: int, message: str):
        super().__init__(f"line {line}: {message}")
        self.line = line


class GridError(IngestError):
    """Timestamps that cannot be placed on the uniform sample grid."""


class EmptyInputError(IngestError):
    pass


@dataclass(frozen=True, eq=False)
class PowerSeries:
    """Power samples in watts, shape ``(n_days, 2N)``; NaN marks a missing sample.

    Use :meth:`from_values` to build a series from raw data; it clips values
    into ``[0, nameplate]`` and records how many samples were clipped.
    """

    values: np.ndarray
    start_date: dt.date
    sample_period: int = 15
    nameplate: float = 3740.0
    clip_count: int = 0

    def __post_init__(self):
        vals = np.array(self.values, dtype=float, copy=True)
        if vals.ndim != 2:
            raise ValueError("values must be a 2-D (days, samples) array")
        if MINUTES_PER_DAY % self.sample_period:
            raise ValueError(f"sample period {self.sample_period} min does not divide a day")
        if vals.shape[1] != MINUTES_PER_DAY // self.sample_period:
            raise ValueError(
                f"expected {MINUTES_PER_DAY // self.sample_period} samples per day, got {vals.shape[1]}"
            )
        if vals.shape[1] % 2:
            raise ValueError("samples per day must be even (2N)")
        finite = vals[np.isfinite(vals)]
        if finite.size and (finite.min() < 0 or finite.max() > self.nameplate):
            raise ValueError("values outside [0, nameplate]; build with PowerSeries.from_values")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    @classmethod
    def from_values(
        cls,
        values,
        start_date: dt.date | str = dt.date(2000, 1, 1),
        sample_period: int = 15,
        nameplate: float = 3740.0,
    ) -> PowerSeries:
        vals = np.array(values, dtype=float, copy=True)
        if vals.ndim == 1:
            vals = vals[None, :]
        finite = np.isfinite(vals)
        over = finite & ((vals > nameplate) | (vals < 0))
        n_clip = int(over.sum())
        if n_clip:
            log.info("clipped %d samples into [0, %g] W", n_clip, nameplate)
        vals[finite] = np.clip(vals[finite], 0.0, nameplate)
        if isinstance(start_date, str):
            start_date = dt.date.fromisoformat(start_date)
        return cls(vals, start_date, sample_period, float(nameplate), n_clip)

    @property
    def n_days(self) -> int:
        return self.values.shape[0]

    @property
    def N(self) -> int:
        return self.values.shape[1] // 2

    @property
    def samples_per_day(self) -> int:
        return self.values.shape[1]

    @property
    def k(self) -> np.ndarray:
        """Sample indices ``-N .. N-1``."""
        return np.arange(-self.N, self.N)

    @property
    def missing(self) -> np.ndarray:
        return np.isnan(self.values)

    @property
    def dates(self) -> list[dt.date]:
        return [self.start_date + dt.timedelta(days=n) for n in range(self.n_days)]

    def day(self, n: int) -> np.ndarray:
        return self.values[n]

    def position(self, k):
        """Row position of sample index ``k``."""
        return np.asarray(k) + self.N

    def minutes(self, k) -> np.ndarray:
        """Time of day in minutes for sample index ``k``."""
        return (np.asarray(k) + self.N) * self.sample_period

    def window(self, n: int, k1: int, k2: int) -> np.ndarray:
        """Samples ``k1..k2`` (inclusive) of day ``n``."""
        return self.values[n, k1 + self.N : k2 + self.N + 1]

    def subset(self, days) -> PowerSeries:
        days = list(days)
        if days != list(range(days[0], days[0] + len(days))):
            raise ValueError("subset days must be contiguous")
        return PowerSeries(
            self.values[days],
            self.start_date + dt.timedelta(days=days[0]),
            self.sample_period,
            self.nameplate,
            0,
        )

    def __eq__(self, other) -> bool:
        if not isinstance(other, PowerSeries):
            return NotImplemented
        return (
            self.start_date == other.start_date
            and self.sample_period == other.sample_period
            and self.nameplate == other.nameplate
            and self.values.shape == other.values.shape
            and np.array_equal(self.values, other.values, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True)
class DaySlice:
    """Closed window ``k1..k2`` of sample indices on day ``day``."""

    day: int
    k1: int
    k2: int

    def __post_init__(self):
        if not self.k1 < self.k2:
            raise ValueError(f"window requires k1 < k2, got ({self.k1}, {self.k2})")

    def check(self, series: PowerSeries) -> None:
        if self.k1 < -series.N or self.k2 >= series.N:
            raise ValueError(f"window ({self.k1}, {self.k2}) outside the day grid")

    @property
    def length(self) -> int:
        return self.k2 - self.k1 + 1


# ---------------------------------------------------------------- CSV ingestion

_POWER_HEADER = ("date", "time", "power_w")
_IV_HEADER = ("date", "time", "current_a", "voltage_v")


def _parse_minutes(text: str, line: int) -> float:
    parts = text.strip().split(":")
    if len(parts) not in (2, 3):
        raise ParseError(line, f"bad time {text!r}, expected HH:MM")
    try:
        hh, mm = int(parts[0]), int(parts[1])
        ss = float(parts[2]) if len(parts) == 3 else 0.0
    except ValueError:
        raise ParseError(line, f"bad time {text!r}, expected HH:MM") from None
    if not (0 <= hh < 24 and 0 <= mm < 60 and 0 <= ss < 60):
        raise ParseError(line, f"time out of range: {text!r}")
    return hh * 60 + mm + ss / 60.0


def _parse_float(text: str, line: int, what: str) -> float:
    text = text.strip()
    if text == "":
        return math.nan
    try:
        v = float(text)
    except ValueError:
        raise ParseError(line, f"bad {what} value {text!r}") from None
    if not math.isfinite(v):
        raise ParseError(line, f"non-finite {what} value {text!r}")
    return v


def ingest_csv(path, sample_period: int = 15, nameplate: float = 3740.0) -> PowerSeries:
    """Read a power CSV and snap its rows onto the uniform sample grid.

    Accepted layouts (header required)::

        date,time,power_w
        date,time,current_a,voltage_v

    Timestamps are snapped to the nearest grid point; an offset of half a
    sample period or more is a :class:`GridError`, as are two rows landing on
    the same grid point.  Grid points without a row, or with an empty value
    field, are missing.  Every calendar day between the first and last date
    is present in the result.
    """
    path = Path(path)
    if MINUTES_PER_DAY % sample_period:
        raise ValueError(f"sample period {sample_period} min does not divide a day")
    per_day = MINUTES_PER_DAY // sample_period
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [(i + 1, r) for i, r in enumerate(csv.reader(fh)) if r and any(c.strip() for c in r)]
    if not rows:
        raise EmptyInputError(f"{path}: file is empty")
    header = tuple(c.strip().lower() for c in rows[0][1])
    if header == _POWER_HEADER:
        iv = False
    elif header == _IV_HEADER:
        iv = True
    else:
        raise ParseError(rows[0][0], f"unrecognised header {','.join(header)!r}")
    body = rows[1:]
    if not body:
        raise EmptyInputError(f"{path}: no data rows")

    samples: dict[tuple[dt.date, int], float] = {}
    width = 4 if iv else 3
    for line, row in body:
        if len(row) != width:
            raise ParseError(line, f"expected {width} fields, got {len(row)}")
        try:
            day = dt.date.fromisoformat(row[0].strip())
        except ValueError:
            raise ParseError(line, f"bad date {row[0]!r}, expected YYYY-MM-DD") from None
        minutes = _parse_minutes(row[1], line)
        if iv:
            cur = _parse_float(row[2], line, "current")
            volt = _parse_float(row[3], line, "voltage")
            value = cur * volt
        else:
            value = _parse_float(row[2], line, "power")
        pos = int(round(minutes / sample_period))
        if abs(minutes - pos * sample_period) >= sample_period / 2:
            raise GridError(f"line {line}: time {row[1].strip()} is not within half a period of the grid")
        if pos == per_day:
            day, pos = day + dt.timedelta(days=1), 0
        key = (day, pos)
        if key in samples:
            raise GridError(f"line {line}: duplicate sample for {day} slot {pos}")
        samples[key] = value

    first = min(d for d, _ in samples)
    last = max(d for d, _ in samples)
    n_days = (last - first).days + 1
    vals = np.full((n_days, per_day), np.nan)
    for (day, pos), v in samples.items():
        vals[(day - first).days, pos] = v
    series = PowerSeries.from_values(vals, first, sample_period, nameplate)
    if series.clip_count:
        log.warning("%s: %d samples clipped into [0, %g] W", path, series.clip_count, nameplate)
    return series


def write_csv(series: PowerSeries, path) -> None:
    """Canonical writer: ``date,time,power_w``, 6 significant digits, LF endings."""
    lines = [",".join(_POWER_HEADER)]
    for n, day in enumerate(series.dates):
        iso = day.isoformat()
        for p in range(series.samples_per_day):
            minutes = p * series.sample_period
            v = series.values[n, p]
            txt = "" if math.isnan(v) else f"{v:.6g}"
            lines.append(f"{iso},{minutes // 60:02d}:{minutes % 60:02d},{txt}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def daylight_mask(series: PowerSeries, threshold: float = 1.0) -> list[DaySlice | None]:
    """Per-day interval between the first and last sample above ``threshold``.

    ``None`` flags a day with fewer than two samples above the threshold.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    out: list[DaySlice | None] = []
    with np.errstate(invalid="ignore"):
        above = series.values > threshold
    for n in range(series.n_days):
        idx = np.flatnonzero(above[n])
        if idx.size < 2:
            out.append(None)
        else:
            out.append(DaySlice(n, int(idx[0]) - series.N, int(idx[-1]) - series.N))
    return out
