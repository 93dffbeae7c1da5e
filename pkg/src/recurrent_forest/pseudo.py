"""Kaplan-Meier window survival and jackknife pseudo-observations."""
from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from .events import CovariatePanel, _fmt
from .windows import LongitudinalData


class WindowTooSmallError(ValueError):
    pass


class MissingCovariateError(ValueError):
    def __init__(self, cells):
        self.cells = cells
        shown = ", ".join(f"({s}, t={t:g}, {n})" for s, t, n in cells[:10])
        more = f" and {len(cells) - 10} more" if len(cells) > 10 else ""
        super().__init__(f"missing covariate cells: {shown}{more}")


def km_survival(x, delta, tau: float) -> float:
    """Product-limit estimate of P(T >= tau) from event times strictly below tau.

    Events precede censorings at tied times. If censoring empties the risk
    set before tau the curve stays at its last value.
    """
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta)
    if x.size == 0:
        raise ValueError("km_survival needs at least one observation")
    if tau < 0:
        raise ValueError("tau must be non-negative")
    ev_times = np.unique(x[(delta == 1) & (x < tau)])
    xs = np.sort(x)
    ev_sorted = np.sort(x[delta == 1])
    s = 1.0
    for u in ev_times:
        at_risk = len(xs) - np.searchsorted(xs, u, side="left")
        d = np.searchsorted(ev_sorted, u, side="right") - np.searchsorted(ev_sorted, u, side="left")
        s *= 1.0 - d / at_risk
    return float(s)


def _pseudo_direct(x, delta, tau):
    n = len(x)
    full = km_survival(x, delta, tau)
    keep = np.ones(n, dtype=bool)
    out = np.empty(n)
    for i in range(n):
        keep[i] = False
        out[i] = n * full - (n - 1) * km_survival(x[keep], delta[keep], tau)
        keep[i] = True
    return out


def _pseudo_vectorized(x, delta, tau):
    # leave-one-out product-limit factors for all subjects at once
    n = len(x)
    ev = np.unique(x[(delta == 1) & (x < tau)])
    if ev.size == 0:
        return np.ones(n)
    xs = np.sort(x)
    ev_sorted = np.sort(x[delta == 1])
    r = (n - np.searchsorted(xs, ev, side="left")).astype(float)
    d = (np.searchsorted(ev_sorted, ev, side="right")
         - np.searchsorted(ev_sorted, ev, side="left")).astype(float)
    full = 1.0
    for k in range(ev.size):
        full *= 1.0 - d[k] / r[k]
    r_loo = r[None, :] - (x[:, None] >= ev[None, :])
    d_loo = d[None, :] - ((x[:, None] == ev[None, :]) & (delta[:, None] == 1))
    with np.errstate(divide="ignore", invalid="ignore"):
        fac = np.where(r_loo > 0, 1.0 - d_loo / r_loo, 1.0)
    loo = np.ones(n)
    for k in range(ev.size):
        loo *= fac[:, k]
    return n * full - (n - 1) * loo


def pseudo_values(x, delta, tau: float, method: str = "direct") -> np.ndarray:
    """Jackknife pseudo-observations ``n*S - (n-1)*S_(-i)`` of P(T >= tau).

    ``method="vectorized"`` computes all leave-one-out curves in one pass and
    agrees with the direct recomputation to rounding error.
    """
    x = np.asarray(x, dtype=float)
    delta = np.asarray(delta, dtype=np.int64)
    if len(x) < 2:
        raise WindowTooSmallError("window too small for jackknife (n < 2)")
    if method == "direct":
        return _pseudo_direct(x, delta, tau)
    if method == "vectorized":
        return _pseudo_vectorized(x, delta, tau)
    raise ValueError(f"unknown method {method!r}")


def _exhausted_before(x, delta, tau) -> bool:
    # largest observation is a censoring below tau: curve extended flat
    i = np.argmax(x)
    return bool(x[i] < tau and delta[x == x[i]].max() == 0)


@dataclass
class PseudoDataset:
    """Pseudo-observation outcomes with covariates, one row per (subject, check-in).

    ``Z`` excludes the check-in time; :meth:`features` appends it as the
    last column.
    """

    subject_id: np.ndarray
    t: np.ndarray
    y: np.ndarray
    n_at_risk: np.ndarray
    Z: np.ndarray
    names: list[str]
    flat_windows: list[float] = field(default_factory=list)

    def __len__(self):
        return len(self.y)

    @property
    def feature_names(self) -> list[str]:
        return list(self.names) + ["t"]

    def features(self) -> np.ndarray:
        return np.column_stack([self.Z, self.t]) if self.Z.size else self.t[:, None].copy()

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["subject_id", "t", "pseudo", *self.names]) + "\n")
        for i in range(len(self.y)):
            zs = ",".join("" if np.isnan(v) else repr(float(v)) for v in self.Z[i])
            line = f"{self.subject_id[i]},{_fmt(self.t[i])},{float(self.y[i])!r}"
            buf.write(line + ("," + zs if zs else "") + "\n")
        return buf.getvalue()

    @classmethod
    def from_csv(cls, source) -> "PseudoDataset":
        if isinstance(source, str):
            source = io.StringIO(source)
        reader = csv.reader(source)
        header = [h.strip() for h in next(reader)]
        if header[:3] != ["subject_id", "t", "pseudo"]:
            raise ValueError(f"bad pseudo header {header!r}")
        names = header[3:]
        sid, t, y, z = [], [], [], []
        for row in reader:
            if not row:
                continue
            sid.append(row[0])
            t.append(float(row[1]))
            y.append(float(row[2]))
            z.append([float(c) if c.strip() else np.nan for c in row[3:]])
        t = np.array(t)
        n_at_risk = np.zeros(len(t), dtype=np.int64)
        for u in np.unique(t):
            n_at_risk[t == u] = np.sum(t == u)
        Z = np.array(z, dtype=float).reshape(len(t), len(names))
        return cls(np.array(sid, dtype=object), t, np.array(y), n_at_risk, Z, names)


def window_pseudo(data: LongitudinalData, tau: float, method: str = "direct"):
    """Pseudo values for every row, computed separately within each check-in time."""
    y = np.empty(len(data))
    n_at_risk = np.empty(len(data), dtype=np.int64)
    too_small = []
    flat = []
    for u in np.unique(data.t):
        idx = np.flatnonzero(data.t == u)
        if len(idx) < 2:
            too_small.append(float(u))
            continue
        x, d = data.x[idx], data.delta[idx]
        y[idx] = pseudo_values(x, d, tau, method)
        n_at_risk[idx] = len(idx)
        if _exhausted_before(x, d, tau):
            flat.append(float(u))
    if too_small:
        raise WindowTooSmallError(
            "window too small for jackknife at t=" + ", ".join(f"{u:g}" for u in too_small))
    return y, n_at_risk, flat


def build_pseudo_dataset(data: LongitudinalData, tau: float,
                         covariates: CovariatePanel | np.ndarray | None = None,
                         names: list[str] | None = None,
                         method: str = "direct") -> PseudoDataset:
    """Attach window pseudo-observations to each longitudinal row with covariates.

    ``covariates`` is either a :class:`CovariatePanel` or an array aligned
    with the rows of ``data``.
    """
    y, n_at_risk, flat = window_pseudo(data, tau, method)
    if covariates is None:
        Z = np.empty((len(data), 0))
        names = []
    elif isinstance(covariates, CovariatePanel):
        names = covariates.names
        Z = np.array([covariates.lookup(s, t) for s, t in zip(data.subject_id, data.t)],
                     dtype=float).reshape(len(data), len(names))
    else:
        Z = np.asarray(covariates, dtype=float)
        if Z.shape[0] != len(data):
            raise ValueError("covariate rows do not align with longitudinal rows")
        names = list(names) if names is not None else [f"z{j + 1}" for j in range(Z.shape[1])]
    if Z.size and np.isnan(Z).any():
        cells = [(str(data.subject_id[i]), float(data.t[i]), names[j])
                 for i, j in zip(*np.nonzero(np.isnan(Z)))]
        raise MissingCovariateError(cells)
    return PseudoDataset(data.subject_id.copy(), data.t.copy(), y, n_at_risk, Z, list(names), flat)
