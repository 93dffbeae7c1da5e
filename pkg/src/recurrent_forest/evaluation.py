"""Concordance, subject-bootstrap standard errors and multiple-imputation pooling."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit


@dataclass
class ScoredRows:
    """Longitudinal rows with a predicted event-free probability (higher = safer)."""

    subject_id: np.ndarray
    t: np.ndarray
    x: np.ndarray
    delta: np.ndarray
    score: np.ndarray

    def __post_init__(self):
        self.score = np.asarray(self.score, dtype=float)
        if not np.isfinite(self.score).all():
            raise ValueError("scores must be finite")

    def __len__(self):
        return len(self.x)

    def take(self, idx) -> "ScoredRows":
        return ScoredRows(self.subject_id[idx], self.t[idx], self.x[idx],
                          self.delta[idx], self.score[idx])


@njit(cache=True)
def _concordance_counts(x, delta, score_rank, n_ranks):
    # Fenwick tree over score ranks; rows inserted in decreasing x
    n = x.shape[0]
    order = np.argsort(-x, kind="mergesort")
    tree = np.zeros(n_ranks + 1, dtype=np.int64)
    inserted = 0
    comparable = 0
    concordant = 0
    tied = 0
    i = 0
    while i < n:
        j = i
        while j < n and x[order[j]] == x[order[i]]:
            j += 1
        for q in range(i, j):
            a = order[q]
            if delta[a] != 1:
                continue
            r = score_rank[a]
            le = 0
            k = r + 1
            while k > 0:
                le += tree[k]
                k -= k & (-k)
            lt = 0
            k = r
            while k > 0:
                lt += tree[k]
                k -= k & (-k)
            comparable += inserted
            concordant += inserted - le
            tied += le - lt
        for q in range(i, j):
            k = score_rank[order[q]] + 1
            while k <= n_ranks:
                tree[k] += 1
                k += k & (-k)
            inserted += 1
        i = j
    return comparable, concordant, tied


def concordance_counts(x, delta, score):
    """(comparable, concordant, tied) pair counts.

    A pair is comparable when the shorter time is an event and the times
    differ; it is concordant when that row has the strictly lower score.
    """
    x = np.ascontiguousarray(x, dtype=np.float64)
    delta = np.ascontiguousarray(delta, dtype=np.int64)
    _, rank = np.unique(np.asarray(score, dtype=float), return_inverse=True)
    rank = np.ascontiguousarray(rank.ravel(), dtype=np.int64)
    return _concordance_counts(x, delta, rank, int(rank.max()) + 1 if len(rank) else 1)


def harrell_c(rows: ScoredRows, within_t: bool = False) -> float:
    """Harrell's C over all row pairs, or only pairs sharing a check-in time."""
    if within_t:
        comp = conc = tie = 0
        for u in np.unique(rows.t):
            m = rows.t == u
            a, b, c = concordance_counts(rows.x[m], rows.delta[m], rows.score[m])
            comp += a
            conc += b
            tie += c
    else:
        comp, conc, tie = concordance_counts(rows.x, rows.delta, rows.score)
    if comp == 0:
        raise ValueError("no comparable pairs")
    return (conc + 0.5 * tie) / comp


@dataclass
class BootstrapResult:
    se: float
    values: np.ndarray
    redraws: int


def bootstrap_se(metric, rows: ScoredRows, b: int = 100, rng=None,
                 max_redraws: int | None = None) -> BootstrapResult:
    """Empirical sd of ``metric`` over ``b`` subject-level bootstrap resamples.

    Resamples on which the metric raises ``ValueError`` are redrawn, at most
    ``max_redraws`` times in total (default ``10*b``).
    """
    if b < 2:
        raise ValueError("need b >= 2 bootstrap samples")
    rng = np.random.default_rng(rng)
    subjects, inv = np.unique(rows.subject_id.astype(str), return_inverse=True)
    by_subject = np.split(np.argsort(inv, kind="stable"),
                          np.cumsum(np.bincount(inv, minlength=len(subjects)))[:-1])
    cap = 10 * b if max_redraws is None else max_redraws
    values = []
    redraws = 0
    while len(values) < b:
        draw = rng.integers(0, len(subjects), size=len(subjects))
        idx = np.concatenate([by_subject[j] for j in draw])
        try:
            values.append(float(metric(rows.take(idx))))
        except ValueError:
            redraws += 1
            if redraws > cap:
                raise RuntimeError(f"metric undefined on {redraws} resamples") from None
    values = np.array(values)
    # a constant metric gets an exact zero rather than rounding noise
    se = 0.0 if np.all(values == values[0]) else float(values.std(ddof=1))
    return BootstrapResult(se, values, redraws)


@dataclass(frozen=True)
class PooledEstimate:
    estimate: float
    within: float
    between: float
    total: float
    m: int

    @property
    def se(self) -> float:
        return float(np.sqrt(self.total))


def rubin_combine(estimates, variances) -> PooledEstimate:
    """Pool m imputation-specific estimates: T = W + (1 + 1/m) B."""
    q = np.asarray(estimates, dtype=float)
    u = np.asarray(variances, dtype=float)
    m = len(q)
    if m < 2:
        raise ValueError("need at least two imputations")
    if len(u) != m:
        raise ValueError("estimates and variances differ in length")
    if (u < 0).any():
        raise ValueError("variances must be non-negative")
    # sort first so the result does not depend on input order
    q = np.sort(q)
    w = float(np.sort(u).mean())
    between = float(q.var(ddof=1))
    return PooledEstimate(float(q.mean()), w, between, w + (1 + 1 / m) * between, m)
