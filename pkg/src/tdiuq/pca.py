"""Principal component analysis by SVD of the centered data matrix."""

from __future__ import annotations

import json
import numbers

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .core import ValidationError


class DegeneratePCAError(ValidationError):
    """The data has no variance, so explained-variance ratios are undefined."""


def _fix_signs(components, tol=1e-12):
    """Flip rows so the first non-negligible entry of each is nonnegative."""
    out = components.copy()
    for i, row in enumerate(out):
        scale = np.max(np.abs(row))
        if scale == 0:
            continue
        j = np.flatnonzero(np.abs(row) > tol * scale)[0]
        if row[j] < 0:
            out[i] = -row
    return out


class PCA(TransformerMixin, BaseEstimator):
    """Center-only PCA for high-dimensional, strongly correlated outputs.

    Samples are rows of ``X`` (scikit-learn convention), so ``X`` is the
    transpose of the ``p x N`` data matrix in which each column is one
    simulated time series.

    Parameters
    ----------
    n_components : int, float or None, default=0.999
        Number of retained components.  A float in (0, 1] is an
        explained-variance threshold: the smallest count whose cumulative
        ratio reaches it is kept.  ``None`` keeps all ``min(N, p)``.

    Attributes
    ----------
    mean_ : ndarray of shape (p,)
    components_ : ndarray of shape (min(N, p), p)
        All orthonormal principal axes, ordered by decreasing singular value.
        Only the first ``n_components_`` are used by ``transform``.
    singular_values_ : ndarray of shape (min(N, p),)
    explained_variance_ratio_ : ndarray of shape (min(N, p),)
    n_components_ : int
    degenerate_ : bool
        True when every singular value is zero (constant data).
    """

    def __init__(self, n_components=0.999):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, ensure_min_samples=2)
        self.n_samples_, self.n_features_in_ = X.shape
        self.mean_ = X.mean(axis=0)
        Xc = X - self.mean_
        # Xc = V S U^T, so rows of U^T are the principal axes
        _, s, Ut = np.linalg.svd(Xc, full_matrices=False)
        self.components_ = _fix_signs(Ut)
        self.singular_values_ = s
        total = float(np.sum(s**2))
        scale = float(np.sum(X**2)) or 1.0
        self.degenerate_ = total <= 1e-28 * scale
        if self.degenerate_:
            self.explained_variance_ratio_ = np.zeros_like(s)
            self.n_components_ = 0
            return self
        self.explained_variance_ratio_ = s**2 / total
        self.n_components_ = self._resolve_n_components()
        return self

    def _resolve_n_components(self):
        nc = self.n_components
        m = self.singular_values_.size
        if nc is None:
            return m
        if isinstance(nc, numbers.Integral) and not isinstance(nc, bool):
            if not 1 <= nc <= m:
                raise ValidationError(f"n_components={nc} outside [1, {m}]")
            return int(nc)
        return self.select_components(float(nc))

    def select_components(self, threshold: float) -> int:
        """Smallest component count whose cumulative explained variance reaches ``threshold``."""
        check_is_fitted(self, "components_")
        if not 0 < threshold <= 1:
            raise ValidationError("threshold must lie in (0, 1]")
        if self.degenerate_:
            raise DegeneratePCAError("explained variance undefined for constant data")
        return select_components(self.explained_variance_ratio_, threshold)

    def set_n_components(self, n: int):
        check_is_fitted(self, "components_")
        if not 1 <= n <= self.components_.shape[0]:
            raise ValidationError(f"cannot keep {n} components")
        self.n_components_ = int(n)
        return self

    @property
    def projection_(self):
        """The retained axes, shape (n_components_, p)."""
        return self.components_[: self.n_components_]

    def transform(self, X):
        check_is_fitted(self, "components_")
        X = np.asarray(X, dtype=float)
        if X.shape[-1] != self.n_features_in_:
            raise ValidationError(f"expected {self.n_features_in_} features, got {X.shape[-1]}")
        return (X - self.mean_) @ self.projection_.T

    def inverse_transform(self, scores):
        check_is_fitted(self, "components_")
        scores = np.asarray(scores, dtype=float)
        if scores.shape[-1] != self.n_components_:
            raise ValidationError(f"expected {self.n_components_} scores, got {scores.shape[-1]}")
        return self.mean_ + scores @ self.projection_

    def reconstruction_residual(self, n=None):
        """Mean squared reconstruction error per training sample with ``n`` components."""
        n = self.n_components_ if n is None else n
        return float(np.sum(self.singular_values_[n:] ** 2) / self.n_samples_)

    def to_dict(self):
        check_is_fitted(self, "components_")
        return {
            "kind": "pca",
            "n_components": self.n_components,
            "n_components_": self.n_components_,
            "n_samples": self.n_samples_,
            "mean": self.mean_.tolist(),
            "components": self.components_.tolist(),
            "singular_values": self.singular_values_.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio_.tolist(),
            "degenerate": bool(self.degenerate_),
        }

    @classmethod
    def from_dict(cls, d):
        model = cls(n_components=d.get("n_components"))
        model.mean_ = np.asarray(d["mean"], dtype=float)
        model.components_ = np.asarray(d["components"], dtype=float)
        model.singular_values_ = np.asarray(d["singular_values"], dtype=float)
        model.explained_variance_ratio_ = np.asarray(d["explained_variance_ratio"], dtype=float)
        model.n_components_ = int(d["n_components_"])
        model.n_samples_ = int(d["n_samples"])
        model.n_features_in_ = model.mean_.size
        model.degenerate_ = bool(d["degenerate"])
        return model

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)


def select_components(ratios, threshold: float) -> int:
    ratios = np.asarray(ratios, dtype=float)
    cumulative = np.cumsum(ratios)
    # tolerate rounding in the cumulative sum
    hit = np.flatnonzero(cumulative >= threshold - 1e-12)
    return int(hit[0]) + 1 if hit.size else ratios.size


def fit_data_matrix(A, n_components=0.999) -> PCA:
    """Fit on a ``p x N`` data matrix whose columns are samples."""
    return PCA(n_components=n_components).fit(np.asarray(A, dtype=float).T)
