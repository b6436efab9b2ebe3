"""Hermite feature maps, feature standardization and weighted least squares.

The one-dimensional polynomials are the physicists' Hermite polynomials
divided by ``sqrt(2**n n!)``. They are orthonormal for the Gaussian weight
``exp(-x**2) / sqrt(pi)``, i.e. under ``N(0, 1/2)``.
"""

from __future__ import annotations

import functools
import itertools
import math
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

SCALE_FLOOR = 1e-8
RIDGE = 1e-8


def hermite_1d(ell: int, x):
    """Normalized Hermite polynomial of degree ``ell`` evaluated at ``x``."""
    if ell < 0:
        raise ValueError("degree must be non-negative")
    return hermite_table(ell, x)[..., ell]


def hermite_table(D: int, x) -> np.ndarray:
    """Values of degrees ``0..D`` stacked on a trailing axis."""
    x = np.asarray(x, dtype=float)
    out = np.empty(x.shape + (D + 1,))
    out[..., 0] = 1.0
    if D >= 1:
        out[..., 1] = math.sqrt(2.0) * x
    for n in range(1, D):
        out[..., n + 1] = math.sqrt(2.0 / (n + 1)) * x * out[..., n] - math.sqrt(n / (n + 1)) * out[..., n - 1]
    return out


@dataclass(frozen=True)
class MultiIndexSet:
    """All ``d``-tuples of total degree at most ``D``, in lexicographic order."""

    d: int
    D: int

    def __post_init__(self):
        if self.d < 1 or self.D < 0:
            raise ValueError("need d >= 1 and D >= 0")

    @property
    def indices(self) -> tuple:
        return _indices(self.d, self.D)

    @property
    def L(self) -> int:
        return len(self.indices)


@functools.lru_cache(maxsize=None)
def _indices(d: int, D: int) -> tuple:
    return tuple(ell for ell in itertools.product(range(D + 1), repeat=d) if sum(ell) <= D)


def hermite_tensor(ell, x):
    """Product of one-dimensional values across coordinates."""
    ell = tuple(ell)
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != len(ell):
        raise ValueError(f"multi-index of length {len(ell)} for {x.shape[-1]}-vectors")
    out = np.ones(x.shape[:-1])
    for c, n in enumerate(ell):
        out = out * hermite_1d(n, x[..., c])
    return out


def hermite_features(z, index_set: MultiIndexSet) -> np.ndarray:
    """Feature matrix of shape ``z.shape[:-1] + (L,)`` for standardized inputs ``z``."""
    z = np.asarray(z, dtype=float)
    tables = [hermite_table(index_set.D, z[..., c]) for c in range(index_set.d)]
    cols = []
    for ell in index_set.indices:
        col = tables[0][..., ell[0]]
        for c in range(1, index_set.d):
            col = col * tables[c][..., ell[c]]
        cols.append(col)
    return np.stack(cols, axis=-1)


class FeatureStandardizer(TransformerMixin, BaseEstimator):
    """Center and scale samples before the Hermite map.

    ``mode="diag"`` divides by the square roots of the diagonal of the
    population covariance. ``mode="cholesky"`` whitens with the upper
    factor ``U`` of ``Sigma = U^T U`` and falls back to ``diag`` (setting
    ``fallback_``) when the covariance is degenerate.
    """

    def __init__(self, mode: str = "diag", floor: float = SCALE_FLOOR):
        self.mode = mode
        self.floor = floor

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        if self.mode not in ("diag", "cholesky"):
            raise ValueError(f"unknown mode {self.mode!r}")
        self.mean_ = X.mean(axis=0)
        centered = X - self.mean_
        cov = np.einsum("na,nb->ab", centered, centered) / X.shape[0]
        self.n_features_in_ = X.shape[1]
        self.fallback_ = False
        self.chol_ = None
        if self.mode == "cholesky":
            try:
                U = linalg.cholesky(cov, lower=False)
                if np.min(np.diag(U)) <= self.floor:
                    raise linalg.LinAlgError("degenerate covariance")
                self.chol_ = U
            except linalg.LinAlgError:
                self.fallback_ = True
        self.scale_ = np.maximum(np.sqrt(np.clip(np.diag(cov), 0.0, None)), self.floor)
        return self

    def transform(self, X):
        check_is_fitted(self, "mean_")
        X = np.asarray(X, dtype=float)
        centered = X - self.mean_
        if self.chol_ is not None:
            # row convention: z = x U^{-1}, so that Cov(z) = I
            flat = centered.reshape(-1, self.n_features_in_)
            z = linalg.solve_triangular(self.chol_, flat.T, trans="T", lower=False).T
            return z.reshape(X.shape)
        return centered / self.scale_


def fit_standardizer(samples, mode: str = "diag") -> FeatureStandardizer:
    samples = np.asarray(samples, dtype=float)
    if samples.ndim == 1:
        samples = samples[:, None]
    return FeatureStandardizer(mode=mode).fit(samples)


def weighted_least_squares(X, y, w, ridge: float = RIDGE) -> np.ndarray:
    """Minimize ``sum_j w_j |y_j - X_j c|^2`` through shifted normal equations.

    Parameters
    ----------
    X : array of shape (n, L)
    y : array of shape (n,) or (n, d)
        Each target column is an independent regression on ``X``.
    w : array of shape (n,)
        Non-negative weights, not all zero.
    ridge : float
        The normal matrix is shifted by ``ridge * trace / L``, followed by
        one step of iterative refinement on the unshifted equations.

    Returns
    -------
    coef : array of shape (L,) or (L, d)
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    w = np.asarray(w, dtype=float)
    if X.ndim != 2 or X.shape[0] < 1:
        raise ValueError("X must be a non-empty 2-d array")
    if w.shape != (X.shape[0],) or y.shape[0] != X.shape[0]:
        raise ValueError("X, y and w disagree on the sample count")
    if np.any(w < 0) or not np.all(np.isfinite(w)):
        raise ValueError("weights must be finite and non-negative")
    if not np.any(w > 0):
        raise ValueError("all weights are zero")
    L = X.shape[1]
    Xw = X * w[:, None]
    # einsum keeps the reduction order independent of BLAS threading
    A = np.einsum("nl,nm->lm", Xw, X)
    b = np.einsum("nl,n...->l...", Xw, y)
    lam = ridge * np.trace(A) / L
    shifted = A.copy()
    shifted[np.diag_indices(L)] += lam
    try:
        factor = linalg.cho_factor(shifted)
        solve = lambda rhs: linalg.cho_solve(factor, rhs)  # noqa: E731
    except linalg.LinAlgError:
        solve = lambda rhs: linalg.lstsq(shifted, rhs)[0]  # noqa: E731
    coef = solve(b)
    # one refinement step against the unshifted system removes the ridge
    # bias on well-conditioned data and stays damped along collinear directions
    return coef + solve(b - A @ coef)


class HermiteFeatures(TransformerMixin, BaseEstimator):
    """Map standardized ``d``-vectors to tensor Hermite features of total degree ``<= degree``."""

    def __init__(self, degree: int = 4):
        self.degree = degree

    def fit(self, X, y=None):
        X = check_array(X)
        self.n_features_in_ = X.shape[1]
        self.index_set_ = MultiIndexSet(X.shape[1], self.degree)
        return self

    def transform(self, X):
        check_is_fitted(self, "index_set_")
        return hermite_features(np.asarray(X, dtype=float), self.index_set_)


class HermiteRegressor(RegressorMixin, BaseEstimator):
    """Weighted Hermite regression of a vector target on a ``d``-vector input."""

    def __init__(self, degree: int = 4, standardize: str = "diag", ridge: float = RIDGE):
        self.degree = degree
        self.standardize = standardize
        self.ridge = ridge

    def fit(self, X, y, sample_weight=None):
        X = check_array(X, ensure_min_samples=2)
        y = np.asarray(y, dtype=float)
        w = np.ones(X.shape[0]) if sample_weight is None else np.asarray(sample_weight, dtype=float)
        self.standardizer_ = FeatureStandardizer(mode=self.standardize).fit(X)
        self.features_ = HermiteFeatures(self.degree).fit(X)
        Phi = self.features_.transform(self.standardizer_.transform(X))
        self.coef_ = weighted_least_squares(Phi, y, w, self.ridge)
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "coef_")
        Phi = self.features_.transform(self.standardizer_.transform(np.asarray(X, dtype=float)))
        return np.einsum("nl,l...->n...", Phi, self.coef_)
