"""Least-squares estimators of conditional expectations ``E[. | X_k]``."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations_with_replacement

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .errors import BasisError
from .validation import check_finite, check_states

COND_MAX = 1e8


def _solve_least_squares(design, y, ridge, cond_max):
    """Ridge-on-demand least squares; the intercept column 0 is never penalized."""
    s = np.linalg.svd(design, compute_uv=False)
    tol = s[0] * max(design.shape) * np.finfo(float).eps
    if s[-1] <= tol:
        raise BasisError(
            f"design matrix is rank deficient ({int(np.sum(s > tol))} of {design.shape[1]} columns)"
        )
    cond = s[0] / s[-1]
    lam = ridge
    if cond > cond_max and lam == 0.0:
        lam = (s[0] / cond_max) ** 2
    if lam > 0.0:
        penalty = np.full(design.shape[1], lam)
        penalty[0] = 0.0
        gram = design.T @ design + np.diag(penalty)
        return np.linalg.solve(gram, design.T @ y), cond, lam
    coef, *_ = np.linalg.lstsq(design, y, rcond=None)
    return coef, cond, lam


class PolynomialRegression(RegressorMixin, BaseEstimator):
    """Total-degree polynomial least squares on standardized states.

    Coordinates with zero spread at fit time are treated as constants, so a
    degenerate state (all paths at ``x0``) reduces to the sample mean.
    Ridge ``lambda`` is applied automatically when the design condition
    number exceeds ``cond_max``.
    """

    def __init__(self, degree=3, ridge=0.0, cond_max=COND_MAX):
        self.degree = degree
        self.ridge = ridge
        self.cond_max = cond_max

    def _features(self, X):
        Xs = (X[:, self.active_] - self.mean_) / self.scale_
        cols = [np.ones(len(X))]
        for deg in range(1, self.degree + 1):
            for combo in combinations_with_replacement(range(Xs.shape[1]), deg):
                cols.append(np.prod(Xs[:, combo], axis=1))
        return np.column_stack(cols)

    def fit(self, X, y):
        X = check_states(X)
        y = check_finite(y, "y")
        if len(y) != len(X):
            raise ValueError("X and y have inconsistent lengths")
        spread = X.std(axis=0)
        self.active_ = np.flatnonzero(spread > 1e-12 * (1.0 + np.abs(X.mean(axis=0))))
        self.mean_ = X[:, self.active_].mean(axis=0)
        self.scale_ = spread[self.active_]
        self.n_features_in_ = X.shape[1]
        design = self._features(X)
        self.coef_, self.condition_number_, self.ridge_used_ = _solve_least_squares(
            design, y, float(self.ridge), self.cond_max
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_states(X, self.n_features_in_)
        return self._features(X) @ self.coef_


class PiecewiseLinearRegression(RegressorMixin, BaseEstimator):
    """Hat-function basis on equal-width buckets of the first state coordinate."""

    def __init__(self, buckets=20, ridge=0.0, cond_max=COND_MAX):
        self.buckets = buckets
        self.ridge = ridge
        self.cond_max = cond_max

    def _features(self, X):
        s = X[:, 0]
        if self.knots_ is None:
            return np.ones((len(X), 1))
        s = np.clip(s, self.knots_[0], self.knots_[-1])
        h = self.knots_[1] - self.knots_[0]
        pos = (s - self.knots_[0]) / h
        idx = np.minimum(np.floor(pos).astype(int), len(self.knots_) - 2)
        w = pos - idx
        design = np.zeros((len(X), len(self.knots_)))
        rows = np.arange(len(X))
        design[rows, idx] = 1.0 - w
        design[rows, idx + 1] = w
        return design

    def fit(self, X, y):
        X = check_states(X)
        y = check_finite(y, "y")
        lo, hi = X[:, 0].min(), X[:, 0].max()
        self.n_features_in_ = X.shape[1]
        if hi - lo <= 1e-12 * (1.0 + abs(lo)):
            self.knots_ = None
        else:
            self.knots_ = np.linspace(lo, hi, self.buckets + 1)
        design = self._features(X)
        if self.knots_ is not None:
            # hat functions sum to one: rewrite with an explicit intercept column
            design = np.column_stack([np.ones(len(X)), design[:, 1:]])
        self.coef_, self.condition_number_, self.ridge_used_ = _solve_least_squares(
            design, y, float(self.ridge), self.cond_max
        )
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        X = check_states(X, self.n_features_in_)
        design = self._features(X)
        if self.knots_ is not None:
            design = np.column_stack([np.ones(len(X)), design[:, 1:]])
        return design @ self.coef_


@dataclass(frozen=True)
class RegressionBasis:
    """Configuration of the conditional-expectation estimator."""

    kind: str = "polynomial"
    degree: int = 3
    buckets: int = 20
    ridge: float = 0.0

    def __post_init__(self):
        if self.kind not in ("polynomial", "piecewise-linear-buckets"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if self.ridge < 0:
            raise ValueError("ridge must be non-negative")

    def make(self):
        if self.kind == "polynomial":
            return PolynomialRegression(degree=self.degree, ridge=self.ridge)
        return PiecewiseLinearRegression(buckets=self.buckets, ridge=self.ridge)
