"""Censored longitudinal data: time to first event in windows starting at check-ins."""
from __future__ import annotations

import io
from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .events import SubjectRecord, _fmt

# relative slack when comparing generated grid times with D - tau
_GRID_EPS = 1e-9


@dataclass(frozen=True)
class WindowGrid:
    """Shared check-in grid ``t_k = t0 + k*a`` capped at ``end - tau``."""

    t0: float
    a: float
    tau: float
    end: float

    def __post_init__(self):
        if not self.a > 0:
            raise ValueError("grid spacing a must be positive")
        if not self.tau > 0:
            raise ValueError("window length tau must be positive")
        if self.t0 < 0 and not np.isclose(self.t0, -self.a):
            raise ValueError("t0 must be >= 0 (or -a for one burn-in window)")

    @property
    def last(self) -> float:
        return self.end - self.tau

    def times(self) -> np.ndarray:
        span = self.last - self.t0
        if span < 0:
            return np.empty(0)
        k = int(np.floor(span / self.a + _GRID_EPS))
        return self.t0 + self.a * np.arange(k + 1)


class LongitudinalRow(NamedTuple):
    subject_id: str
    t: float
    x: float
    delta: int


@dataclass
class LongitudinalData:
    """Columnar store of longitudinal rows, ordered by (subject, t)."""

    subject_id: np.ndarray
    t: np.ndarray
    x: np.ndarray
    delta: np.ndarray

    def __len__(self):
        return len(self.t)

    def __iter__(self):
        for s, t, x, d in zip(self.subject_id, self.t, self.x, self.delta):
            yield LongitudinalRow(str(s), float(t), float(x), int(d))

    def rows(self) -> list[LongitudinalRow]:
        return list(self)

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write("subject_id,t,x,delta\n")
        for r in self:
            buf.write(f"{r.subject_id},{_fmt(r.t)},{_fmt(r.x)},{r.delta}\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source) -> "LongitudinalData":
        import csv
        if isinstance(source, str):
            source = io.StringIO(source)
        reader = csv.reader(source)
        header = [h.strip() for h in next(reader)]
        if header[:4] != ["subject_id", "t", "x", "delta"]:
            raise ValueError(f"bad longitudinal header {header!r}")
        sid, t, x, d = [], [], [], []
        for row in reader:
            if not row:
                continue
            sid.append(row[0])
            t.append(float(row[1]))
            x.append(float(row[2]))
            d.append(int(row[3]))
        return cls(np.array(sid, dtype=object), np.array(t), np.array(x),
                   np.array(d, dtype=np.int64))


def checkin_times(grid: WindowGrid, record: SubjectRecord) -> np.ndarray:
    """Grid times at which a subject is still under observation.

    Keeps ``t < C`` strictly and ``t <= D - tau`` inclusively.
    """
    times = grid.times()
    return times[times < record.censoring_time]


def _subject_rows(times: np.ndarray, events: np.ndarray, censor: float):
    # first observed event at or after each check-in (ties count as after)
    idx = np.searchsorted(events, times, side="left")
    has_event = idx < len(events)
    x = censor - times
    x[has_event] = events[idx[has_event]] - times[has_event]
    return x, has_event.astype(np.int64)


def transform(records: Sequence[SubjectRecord], grid: WindowGrid) -> LongitudinalData:
    """Residual time to first event, with event indicator, per (subject, check-in)."""
    sids, ts, xs, ds = [], [], [], []
    grid_times = grid.times()
    for rec in records:
        times = grid_times[grid_times < rec.censoring_time]
        if len(times) == 0:
            continue
        ev = np.asarray(rec.event_times, dtype=float)
        x, d = _subject_rows(times, ev, rec.censoring_time)
        sids.extend([rec.subject_id] * len(times))
        ts.append(times)
        xs.append(x)
        ds.append(d)
    if not ts:
        return LongitudinalData(np.array([], dtype=object), np.empty(0), np.empty(0),
                                np.empty(0, dtype=np.int64))
    return LongitudinalData(np.array(sids, dtype=object), np.concatenate(ts),
                            np.concatenate(xs), np.concatenate(ds))


def capture_rate(records: Sequence[SubjectRecord], grid: WindowGrid) -> float:
    """Fraction of observed events that are the first event of some window."""
    total = 0
    captured = 0
    grid_times = grid.times()
    for rec in records:
        ev = np.asarray(rec.event_times, dtype=float)
        total += len(ev)
        times = grid_times[grid_times < rec.censoring_time]
        if len(ev) == 0 or len(times) == 0:
            continue
        idx = np.searchsorted(ev, times, side="left")
        captured += len(np.unique(idx[idx < len(ev)]))
    if total == 0:
        raise ValueError("no events to capture")
    return captured / total


def recommend_spacing(records: Sequence[SubjectRecord]) -> float:
    """One third of the mean gap time between consecutive events."""
    gaps = np.concatenate([r.gap_times for r in records] or [np.empty(0)])
    if len(gaps) == 0:
        raise ValueError("need at least one subject with two events")
    return float(gaps.mean() / 3.0)
