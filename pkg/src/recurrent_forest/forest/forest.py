"""Historical random forest: subject-level bagging of SSE regression trees."""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from typing import NamedTuple

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from . import _tree


class Tree(NamedTuple):
    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    count: np.ndarray

    @property
    def n_nodes(self) -> int:
        return len(self.feature)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        out = np.empty(len(X))
        for i, x in enumerate(X):
            node = 0
            while self.feature[node] >= 0:
                node = (self.left[node] if x[self.feature[node]] < self.threshold[node]
                        else self.right[node])
            out[i] = self.value[node]
        return out


def two_stage_bootstrap(subject_ids, rng: np.random.Generator):
    """Draw n subjects with replacement.

    Returns ``(counts, oob)`` where ``counts[j]`` is how often unique subject
    j was drawn (each of its rows enters the bag that many times) and
    ``oob`` is the sorted array of subjects never drawn.
    """
    subjects = np.asarray(subject_ids)
    n = len(subjects)
    if n < 1:
        raise ValueError("need at least one subject")
    draws = rng.integers(0, n, size=n)
    counts = np.bincount(draws, minlength=n)
    return counts, subjects[counts == 0]


def _encode(X):
    n, p = X.shape
    codes = np.empty((n, p), dtype=np.int64)
    uniques = []
    for f in range(p):
        u, inv = np.unique(X[:, f], return_inverse=True)
        codes[:, f] = inv
        uniques.append(u)
    kmax = max((len(u) for u in uniques), default=1)
    values = np.zeros((p, kmax))
    for f, u in enumerate(uniques):
        values[f, :len(u)] = u
    n_codes = np.array([len(u) for u in uniques], dtype=np.int64)
    return codes, values, n_codes


def tree_seed_sequence(seed: int, b: int) -> np.random.SeedSequence:
    return np.random.SeedSequence(entropy=seed, spawn_key=(b,))


class HistoricalRandomForest(RegressorMixin, BaseEstimator):
    """Random forest regressor for longitudinal outcomes with subject-level bagging.

    Each tree is grown on a bootstrap sample of subjects; every row of a drawn
    subject enters the bag once per draw. Splits minimise the weighted sum of
    squared errors over thresholds at the distinct values observed in the
    node, with ``max_features`` candidates redrawn at every node.

    Parameters
    ----------
    n_estimators : int, default=500
    max_features : int or None, default=None
        Candidate variables per node; ``None`` means ``ceil(sqrt(p))``.
    min_node_size : int, default=40
        Minimum bagged row count (with multiplicity) in each child of a split.
    max_depth : int or None, default=None
    random_state : int or None
    n_jobs : int, default=1
        Worker threads for growing trees. Results do not depend on it.
    """

    def __init__(self, n_estimators=500, max_features=None, min_node_size=40,
                 max_depth=None, random_state=None, n_jobs=1):
        self.n_estimators = n_estimators
        self.max_features = max_features
        self.min_node_size = min_node_size
        self.max_depth = max_depth
        self.random_state = random_state
        self.n_jobs = n_jobs

    def _mtry(self, p):
        m = math.ceil(math.sqrt(p)) if self.max_features is None else int(self.max_features)
        if not 1 <= m <= p:
            raise ValueError(f"max_features must be in [1, {p}], got {m}")
        return m

    def fit(self, X, y, groups=None):
        """Fit on rows ``X`` with outcomes ``y``; ``groups`` gives each row's subject."""
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True)
        n, p = X.shape
        if p == 0:
            raise ValueError("need at least one covariate")
        if self.n_estimators < 1:
            raise ValueError("n_estimators must be positive")
        if self.min_node_size < 1:
            raise ValueError("min_node_size must be >= 1")
        if groups is None:
            groups = np.arange(n)
        groups = np.asarray(groups)
        if len(groups) != n:
            raise ValueError("groups must align with rows of X")
        mtry = self._mtry(p)
        seed = self.random_state
        if seed is None:
            seed = int(np.random.SeedSequence().entropy % (2**63))
        self.seed_ = int(seed)

        subjects, row_subject = np.unique(groups, return_inverse=True)
        codes, values, n_codes = _encode(X)
        y = np.ascontiguousarray(y, dtype=np.float64)
        max_depth = -1 if self.max_depth is None else int(self.max_depth)
        n_subj = len(subjects)

        def grow(b):
            rng = np.random.default_rng(tree_seed_sequence(self.seed_, b))
            counts, _ = two_stage_bootstrap(np.arange(n_subj), rng)
            w = counts[row_subject].astype(np.float64)
            rows = np.flatnonzero(w > 0).astype(np.int64)
            tree_seed = int(rng.integers(0, 2**63 - 1))
            arrays = _tree.grow_tree(X, codes, values, n_codes, y, w, rows, mtry,
                                     float(self.min_node_size), max_depth, tree_seed)
            return Tree(*arrays), counts

        workers = max(1, int(self.n_jobs or 1))
        if workers == 1:
            results = [grow(b) for b in range(self.n_estimators)]
        else:
            with ThreadPoolExecutor(workers) as pool:
                results = list(pool.map(grow, range(self.n_estimators)))

        self.estimators_ = [t for t, _ in results]
        self.bag_counts_ = np.array([c for _, c in results], dtype=np.int64)
        self.subjects_ = subjects
        self.n_features_in_ = p
        self.mtry_ = mtry
        self._pack()
        oob = self.oob_predict(X, groups)
        self.oob_prediction_ = oob
        return self

    def _pack(self):
        sizes = [t.n_nodes for t in self.estimators_]
        self._offsets = np.concatenate([[0], np.cumsum(sizes)]).astype(np.int64)
        self._flat = tuple(np.concatenate([getattr(t, f) for t in self.estimators_])
                           for f in ("feature", "threshold", "left", "right", "value"))

    def _check_X(self, X):
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, forest was fit with "
                             f"{self.n_features_in_}")
        return X

    def predict(self, X, clip=False):
        """Mean of the tree outputs. ``clip=True`` gives a [0, 1] reporting view."""
        check_is_fitted(self, "estimators_")
        X = self._check_X(X)
        total, used = _tree.predict_sum(*self._flat, self._offsets, X,
                                        np.zeros((0, 0), dtype=np.bool_))
        pred = total / used
        return np.clip(pred, 0.0, 1.0) if clip else pred

    def predict_trees(self, X):
        """Matrix of individual tree outputs, shape (n_rows, n_estimators)."""
        check_is_fitted(self, "estimators_")
        return _tree.predict_each(*self._flat, self._offsets, self._check_X(X))

    def oob_mask(self, groups):
        """Boolean (n_rows, n_trees): True where the row's subject is out of bag."""
        check_is_fitted(self, "estimators_")
        index = {s: j for j, s in enumerate(self.subjects_.tolist())}
        try:
            pos = np.array([index[g] for g in np.asarray(groups).tolist()], dtype=np.int64)
        except KeyError as e:
            raise ValueError(f"subject {e.args[0]!r} unknown to the forest") from None
        return np.ascontiguousarray(self.bag_counts_[:, pos].T == 0)

    def oob_predict(self, X, groups):
        """Out-of-bag predictions; NaN for rows whose subject is in every bag."""
        X = self._check_X(X)
        mask = self.oob_mask(groups)
        total, used = _tree.predict_sum(*self._flat, self._offsets, X, mask)
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(used > 0, total / np.maximum(used, 1), np.nan)
