"""Traditional recurrent-event records and covariate panels.

Events files are comma-separated with header ``subject_id,time,is_event``;
each subject carries exactly one ``is_event=0`` row giving its censoring
time. Covariate files use ``subject_id[,t],name1,...,nameP`` with empty
cells marking missing values.
"""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence, TextIO

import numpy as np

KINDS = ("continuous", "ordered", "binary")


class ParseError(ValueError):
    """Malformed events or covariate input; carries subject and line."""

    def __init__(self, message, subject=None, line=None):
        self.subject = subject
        self.line = line
        where = []
        if subject is not None:
            where.append(f"subject {subject}")
        if line is not None:
            where.append(f"line {line}")
        super().__init__(f"{message} ({', '.join(where)})" if where else message)


class DuplicateCensoringError(ParseError):
    pass


class EventAfterCensoringError(ParseError):
    pass


class NonMonotoneEventsError(ParseError):
    pass


class MissingCensoringError(ParseError):
    pass


class EmptyStreamError(ParseError):
    pass


@dataclass(frozen=True)
class SubjectRecord:
    """Observed recurrent events of one subject plus its censoring time."""

    subject_id: str
    event_times: tuple[float, ...]
    censoring_time: float
    time_unit: str = "days"

    def __post_init__(self):
        ev = self.event_times
        for a, b in zip(ev, ev[1:]):
            if not b > a:
                raise NonMonotoneEventsError("event times not strictly increasing",
                                             self.subject_id)
        if ev and ev[0] < 0:
            raise ParseError("negative event time", self.subject_id)
        if ev and ev[-1] > self.censoring_time:
            raise EventAfterCensoringError("event after censoring time",
                                           self.subject_id)

    @property
    def gap_times(self) -> np.ndarray:
        return np.diff(np.asarray(self.event_times, dtype=float))


def _subject_key(sid: str):
    # numeric-aware ordering keeps S2 before S10
    parts = []
    buf = ""
    for ch in sid:
        if ch.isdigit():
            buf += ch
        else:
            if buf:
                parts.append((1, int(buf), ""))
                buf = ""
            parts.append((0, 0, ch))
    if buf:
        parts.append((1, int(buf), ""))
    return parts


def sort_subject_ids(ids: Iterable[str]) -> list[str]:
    return sorted(ids, key=_subject_key)


def _read_rows(source: TextIO | str):
    if isinstance(source, str):
        source = io.StringIO(source)
    return csv.reader(source)


def parse_events(source: TextIO | str, unit: str = "days",
                 end: float | None = None) -> list[SubjectRecord]:
    """Read an events stream into subject records sorted by subject id.

    Raises a distinct :class:`ParseError` subclass for a duplicate
    censoring row, an event after censoring, non-ascending event times,
    a subject with no censoring row and an empty stream.
    """
    reader = _read_rows(source)
    header = next(reader, None)
    if header is None:
        raise EmptyStreamError("empty events stream")
    header = [h.strip() for h in header]
    if header[:3] != ["subject_id", "time", "is_event"]:
        raise ParseError(f"bad events header {header!r}", line=1)

    events: dict[str, list[tuple[float, int]]] = {}
    censor: dict[str, tuple[float, int]] = {}
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) < 3:
            raise ParseError("expected 3 columns", line=lineno)
        sid, t_raw, e_raw = row[0].strip(), row[1].strip(), row[2].strip()
        try:
            t = float(t_raw)
        except ValueError:
            raise ParseError(f"bad time {t_raw!r}", sid, lineno) from None
        if not math.isfinite(t) or t < 0:
            raise ParseError(f"time must be finite and non-negative, got {t_raw}",
                             sid, lineno)
        if e_raw not in ("0", "1"):
            raise ParseError(f"is_event must be 0 or 1, got {e_raw!r}", sid, lineno)
        events.setdefault(sid, [])
        if e_raw == "1":
            prev = events[sid]
            if prev and not t > prev[-1][0]:
                raise NonMonotoneEventsError(
                    f"non-ascending event times ({prev[-1][0]:g} then {t:g})",
                    sid, lineno)
            prev.append((t, lineno))
        else:
            if sid in censor:
                raise DuplicateCensoringError("duplicate censoring row", sid, lineno)
            censor[sid] = (t, lineno)

    if not events:
        raise EmptyStreamError("events stream has no data rows")

    records = []
    for sid in sort_subject_ids(events):
        if sid not in censor:
            raise MissingCensoringError("no censoring row", sid)
        c, cline = censor[sid]
        times = events[sid]
        for t, lineno in times:
            if t > c:
                raise EventAfterCensoringError(
                    f"event at {t:g} after censoring at {c:g}", sid, lineno)
        if end is not None and c > end:
            raise ParseError(f"censoring time {c:g} beyond administrative end {end:g}",
                             sid, cline)
        records.append(SubjectRecord(sid, tuple(t for t, _ in times), c, unit))
    return records


def _fmt(x: float) -> str:
    x = float(x)
    return str(int(x)) if x.is_integer() and abs(x) < 1e15 else repr(x)


def serialize_events(records: Sequence[SubjectRecord]) -> str:
    """Canonical events text: subjects sorted, events ascending, censoring row last."""
    out = ["subject_id,time,is_event"]
    for rec in sorted(records, key=lambda r: _subject_key(r.subject_id)):
        for t in rec.event_times:
            out.append(f"{rec.subject_id},{_fmt(t)},1")
        out.append(f"{rec.subject_id},{_fmt(rec.censoring_time)},0")
    return "\n".join(out) + "\n"


@dataclass
class CovariatePanel:
    """Real-coded covariates keyed by (subject_id, check-in time).

    ``schema`` is an ordered list of ``(name, kind)`` pairs. Baseline-only
    subjects are stored under ``baseline`` and resolve at every check-in.
    ``NaN`` marks a missing cell.
    """

    schema: list[tuple[str, str]]
    values: dict[tuple[str, float], np.ndarray] = field(default_factory=dict)
    baseline: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.schema]

    @property
    def subjects(self) -> set[str]:
        return set(self.baseline) | {s for s, _ in self.values}

    def lookup(self, subject_id: str, t: float) -> np.ndarray:
        """Covariate vector at a check-in; all-NaN if the subject has no row there."""
        v = self.values.get((subject_id, float(t)))
        if v is not None:
            return v
        b = self.baseline.get(subject_id)
        if b is not None:
            return b
        return np.full(len(self.schema), np.nan)

    def missing_mask(self, subject_id: str, t: float) -> np.ndarray:
        return np.isnan(self.lookup(subject_id, t))


def parse_schema(spec: str | Sequence) -> list[tuple[str, str]]:
    """Parse ``"age:continuous,male:binary"``; bare names default to continuous."""
    if not isinstance(spec, str):
        return [(n, k) for n, k in spec]
    out = []
    for item in spec.split(","):
        item = item.strip()
        if not item:
            continue
        name, _, kind = item.partition(":")
        kind = kind or "continuous"
        if kind not in KINDS:
            raise ValueError(f"unknown covariate kind {kind!r} for {name!r}")
        out.append((name, kind))
    return out


def parse_covariates(source: TextIO | str, schema=None,
                     subjects: Iterable[str] | None = None,
                     grid: Iterable[float] | None = None) -> CovariatePanel:
    """Read a covariate table.

    Without a ``t`` column every row is baseline and carried forward to all
    check-ins. With a ``t`` column, rows are time-specific; ``grid`` (when
    given) fixes the check-ins at which a subject is expected to have a row,
    and absent check-ins are stored as all-missing.
    """
    reader = _read_rows(source)
    header = next(reader, None)
    if header is None:
        raise EmptyStreamError("empty covariate stream")
    header = [h.strip() for h in header]
    if not header or header[0] != "subject_id":
        raise ParseError("covariate header must start with subject_id", line=1)
    timed = len(header) > 1 and header[1] == "t"
    names = header[2:] if timed else header[1:]
    if schema is None:
        schema = [(n, "continuous") for n in names]
    schema = parse_schema(schema)
    for name, _ in schema:
        if name not in names:
            raise ParseError(f"missing required column {name!r}", line=1)
    cols = [names.index(n) + (2 if timed else 1) for n, _ in schema]
    known = set(subjects) if subjects is not None else None

    panel = CovariatePanel(schema)
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not c.strip() for c in row):
            continue
        sid = row[0].strip()
        if known is not None and sid not in known:
            raise ParseError("unknown subject", sid, lineno)
        vec = np.empty(len(schema))
        for j, ((name, kind), c) in enumerate(zip(schema, cols)):
            cell = row[c].strip() if c < len(row) else ""
            if cell == "":
                vec[j] = np.nan
                continue
            try:
                val = float(cell)
            except ValueError:
                raise ParseError(f"non-numeric value {cell!r} in {name}", sid, lineno) from None
            if kind == "binary" and val not in (0.0, 1.0):
                raise ParseError(f"binary covariate {name} must be 0 or 1, got {cell}",
                                 sid, lineno)
            if kind == "ordered" and val != int(val):
                raise ParseError(f"ordered covariate {name} needs integer codes, got {cell}",
                                 sid, lineno)
            vec[j] = val
        t_cell = row[1].strip() if timed else ""
        if t_cell == "":
            panel.baseline[sid] = vec
        else:
            panel.values[(sid, float(t_cell))] = vec

    if timed and grid is not None:
        grid = [float(g) for g in grid]
        for sid in {s for s, _ in panel.values}:
            if sid in panel.baseline:
                continue
            for g in grid:
                panel.values.setdefault((sid, g), np.full(len(schema), np.nan))
    return panel


@dataclass
class ValidationReport:
    missing: list[tuple[str, float, str]] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.missing

    def __str__(self):
        lines = [f"missing {s} t={t:g} {name}" for s, t, name in self.missing]
        return "\n".join(lines + [f"warning: {w}" for w in self.warnings])


def validate_dataset(records: Sequence[SubjectRecord], panel: CovariatePanel,
                     grid) -> ValidationReport:
    """List covariate cells missing at any check-in a subject contributes."""
    from .windows import checkin_times

    report = ValidationReport()
    for rec in records:
        times = checkin_times(grid, rec)
        if len(times) == 0:
            report.warnings.append(
                f"subject {rec.subject_id} contributes no rows (C={rec.censoring_time:g})")
            continue
        for t in times:
            mask = panel.missing_mask(rec.subject_id, t)
            for j in np.flatnonzero(mask):
                report.missing.append((rec.subject_id, float(t), panel.schema[j][0]))
    return report
