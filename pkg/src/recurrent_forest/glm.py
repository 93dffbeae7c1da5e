"""Logit-link regression of pseudo-observations with subject-clustered sandwich variance."""
from __future__ import annotations

import warnings

import numpy as np
from scipy import stats
from scipy.special import expit
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y


class RankDeficientError(ValueError):
    pass


class ConvergenceWarning(UserWarning):
    pass


def _quasi_loglik(X, y, beta):
    eta = X @ beta
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


class PseudoLogitRegression(BaseEstimator):
    """Quasi-likelihood logistic regression for outcomes that may leave [0, 1].

    Solves ``sum_i x_i (y_i - expit(x_i' beta)) = 0`` by iteratively
    reweighted least squares with step-halving, under an independence
    working correlation. The covariance is the sandwich estimator with
    clusters given by ``groups`` (one cluster per row when omitted).

    Parameters
    ----------
    fit_intercept : bool, default=True
    max_iter : int, default=100
    tol : float, default=1e-8
        Convergence threshold on the largest absolute coefficient change.
    """

    def __init__(self, fit_intercept=True, max_iter=100, tol=1e-8):
        self.fit_intercept = fit_intercept
        self.max_iter = max_iter
        self.tol = tol

    def _design(self, X):
        X = np.asarray(X, dtype=float)
        if self.fit_intercept:
            return np.column_stack([np.ones(len(X)), X])
        return X

    def fit(self, X, y, groups=None):
        X, y = check_X_y(X, y, dtype=np.float64, y_numeric=True,
                         ensure_min_features=0)
        D = self._design(X)
        n, k = D.shape
        if k == 0:
            raise ValueError("empty design")
        if np.linalg.matrix_rank(D) < k:
            raise RankDeficientError("design matrix is not of full column rank")

        beta = np.zeros(k)
        ll = _quasi_loglik(D, y, beta)
        converged = False
        it = 0
        for it in range(1, self.max_iter + 1):
            mu = expit(D @ beta)
            w = mu * (1.0 - mu)
            info = D.T @ (w[:, None] * D)
            score = D.T @ (y - mu)
            step = np.linalg.solve(info, score)
            # step-halving keeps the concave quasi-loglik from decreasing
            for _ in range(30):
                cand = beta + step
                ll_new = _quasi_loglik(D, y, cand)
                if ll_new >= ll - 1e-12 * abs(ll) or not np.isfinite(ll):
                    break
                step = step / 2.0
            beta = cand
            ll = ll_new
            if np.max(np.abs(step)) < self.tol:
                converged = True
                break
        if not converged:
            warnings.warn(f"IRLS did not converge in {self.max_iter} iterations",
                          ConvergenceWarning, stacklevel=2)

        mu = expit(D @ beta)
        w = mu * (1.0 - mu)
        info = D.T @ (w[:, None] * D)
        bread = np.linalg.inv(info)
        resid = y - mu
        if groups is None:
            groups = np.arange(n)
        _, g = np.unique(np.asarray(groups), return_inverse=True)
        scores = np.zeros((g.max() + 1, k))
        np.add.at(scores, g, D * resid[:, None])
        meat = scores.T @ scores
        cov = bread @ meat @ bread
        cov = (cov + cov.T) / 2.0

        self.params_ = beta
        self.intercept_ = float(beta[0]) if self.fit_intercept else 0.0
        self.coef_ = beta[1:] if self.fit_intercept else beta
        self.cov_ = cov
        self.naive_cov_ = bread
        self.n_iter_ = it
        self.converged_ = converged
        self.score_norm_ = float(np.linalg.norm(D.T @ resid))
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64, ensure_min_features=0)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} columns, got {X.shape[1]}")
        return self._design(X) @ self.params_

    def predict(self, X):
        """Fitted event-free probability ``expit(x' beta)``; saturates without overflow."""
        return expit(self.decision_function(X))

    def wald_table(self, names=None):
        return wald_table(self, names)


def wald_table(fit: PseudoLogitRegression, names=None) -> list[dict]:
    """Per-coefficient estimate, odds ratio, robust SE, z, two-sided p and 95% CI of the OR."""
    check_is_fitted(fit, "params_")
    k = len(fit.params_)
    if names is None:
        names = [f"x{j}" for j in range(fit.n_features_in_)]
    labels = (["(intercept)"] if fit.fit_intercept else []) + list(names)
    if len(labels) != k:
        raise ValueError("names do not match the number of coefficients")
    se = np.sqrt(np.clip(np.diag(fit.cov_), 0.0, None))
    out = []
    for j in range(k):
        b = float(fit.params_[j])
        z = b / se[j] if se[j] > 0 else (0.0 if b == 0 else np.inf * np.sign(b))
        out.append({
            "term": labels[j],
            "estimate": b,
            "odds_ratio": float(np.exp(b)),
            "se": float(se[j]),
            "z": float(z),
            "p": float(2 * stats.norm.sf(abs(z))),
            "ci_low": float(np.exp(b - 1.96 * se[j])),
            "ci_high": float(np.exp(b + 1.96 * se[j])),
        })
    return out


def model_a_design(Z, history=None) -> np.ndarray:
    """Transformed columns of the correctly specified simulation model.

    ``Z`` has columns Z1..Z7; returns ``Z2 sin(Z1/Z6)``, ``(-1)^[Z2>2] Z3``,
    ``Z1 Z6`` and ``Z2^2 Z4`` (plus the history column if given).
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    z1, z2, z3, z4, z6 = Z[:, 0], Z[:, 1], Z[:, 2], Z[:, 3], Z[:, 5]
    if (z6 == 0).any():
        raise ValueError("Z6 must be non-zero")
    cols = [z2 * np.sin(z1 / z6), np.where(z2 > 2, -z3, z3), z1 * z6, z2 ** 2 * z4]
    if history is not None:
        cols.append(np.asarray(history, dtype=float))
    return np.column_stack(cols)


def model_b_design(Z, history=None) -> np.ndarray:
    """Main effects Z1..Z7, plus the history column if given."""
    Z = np.atleast_2d(np.asarray(Z, dtype=float))[:, :7]
    if history is None:
        return Z.copy()
    return np.column_stack([Z, np.asarray(history, dtype=float)])
