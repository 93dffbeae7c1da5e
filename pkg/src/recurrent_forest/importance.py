"""Out-of-bag permutation tests of variable importance."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import stats

from .forest import HistoricalRandomForest
from .forest import _tree


@dataclass(frozen=True)
class VariableImportance:
    variable: str
    statistic: float
    sd: float
    z: float
    p: float
    d: int


def permutation_importance(forest: HistoricalRandomForest, X, y, groups, var: int,
                           d: int = 100, seed: int = 0, strata=None,
                           name: str | None = None) -> VariableImportance:
    """Permutation test for one column on the out-of-bag rows.

    Each of ``d`` permutations shuffles column ``var`` across the rows that
    have an out-of-bag prediction (within ``strata`` groups when given) and
    records the increase in out-of-bag mean squared error against ``y``.
    The z statistic is the mean increase divided by the sd of the increases
    over permutations, referred to a standard normal (two-sided).
    """
    if d < 2:
        raise ValueError("need d >= 2 permutations")
    X = np.ascontiguousarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=float)
    mask = forest.oob_mask(groups)
    has_oob = mask.any(axis=1)
    if not has_oob.any():
        raise ValueError("no out-of-bag rows")
    X = np.ascontiguousarray(X[has_oob])
    y = y[has_oob]
    mask = np.ascontiguousarray(mask[has_oob])
    flat = forest._flat
    total, used, *paths = _tree.permutation_paths(*flat, forest._offsets, X, mask, var)
    base = float(np.mean((y - total / used) ** 2))
    original = X[:, var].copy()
    if strata is None:
        blocks = [np.arange(len(y))]
    else:
        strata = np.asarray(strata)[has_oob]
        blocks = [np.flatnonzero(strata == u) for u in np.unique(strata)]

    deltas = np.empty(d)
    for s in range(d):
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(var, s)))
        col = original.copy()
        for idx in blocks:
            col[idx] = original[idx[rng.permutation(len(idx))]]
        perm = _tree.permuted_total(*flat, X, var, col, total, *paths)
        deltas[s] = float(np.mean((y - perm / used) ** 2)) - base

    stat = float(deltas.mean())
    sd = float(deltas.std(ddof=1))
    if np.all(deltas == 0):
        z, p = 0.0, 1.0
    elif sd == 0:
        z, p = float(np.copysign(np.inf, stat)), 0.0
    else:
        z = stat / sd
        p = float(2 * stats.norm.sf(abs(z)))
    return VariableImportance(name if name is not None else str(var), stat, sd, z, p, d)


def importance_report(forest: HistoricalRandomForest, X, y, groups, names=None,
                      d: int = 100, seed: int = 0, strata=None, threads: int = 1):
    """Permutation tests for every column, in column order."""
    X = np.asarray(X, dtype=float)
    names = names if names is not None else [f"x{j}" for j in range(X.shape[1])]

    def one(j):
        return permutation_importance(forest, X, y, groups, j, d, seed, strata, names[j])

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(X.shape[1])))
    return [one(j) for j in range(X.shape[1])]
