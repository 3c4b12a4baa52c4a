"""Zero-mean Gaussian-process regression with LML-fitted kernel hyperparameters."""

from __future__ import annotations

import json
import logging
import warnings
from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular
from scipy.optimize import minimize
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .core import NumericalError, ValidationError, as_2d

log = logging.getLogger(__name__)

FAMILIES = ("power_exponential", "rbf", "matern")
JITTER_LADDER = (1e-12, 1e-11, 1e-10, 1e-9, 1e-8, 1e-7, 1e-6)
_SQRT3 = np.sqrt(3.0)
_SQRT5 = np.sqrt(5.0)


@dataclass(frozen=True)
class Kernel:
    """Stationary covariance function.

    ``power_exponential``: ``s^2 exp(-|x - x'|^r / (2 l^2))`` (isotropic).
    ``rbf``: the ``r = 2`` case, optionally with one lengthscale per input.
    ``matern``: closed forms for ``nu`` in {1.5, 2.5}.
    """

    family: str = "rbf"
    amplitude: float = 1.0
    lengthscale: object = 1.0
    exponent: float = 2.0
    nu: float = 2.5

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValidationError(f"unknown kernel family {self.family!r}")
        if not self.amplitude > 0:
            raise ValidationError("amplitude must be positive")
        ls = np.atleast_1d(np.asarray(self.lengthscale, dtype=float))
        if np.any(ls <= 0):
            raise ValidationError("lengthscale must be positive")
        if self.family == "power_exponential":
            if not 0 < self.exponent <= 2:
                raise ValidationError("exponent must lie in (0, 2]")
            if ls.size != 1:
                raise ValidationError("power_exponential takes a single lengthscale")
        if self.family == "matern" and self.nu not in (1.5, 2.5):
            raise ValidationError("only nu = 1.5 and nu = 2.5 are supported")

    @property
    def ls(self):
        return np.atleast_1d(np.asarray(self.lengthscale, dtype=float))

    def __call__(self, X1, X2=None):
        return gram(self, X1, X2)

    def to_dict(self):
        return {
            "family": self.family,
            "amplitude": float(self.amplitude),
            "lengthscale": self.ls.tolist(),
            "exponent": float(self.exponent),
            "nu": float(self.nu),
        }

    @classmethod
    def from_dict(cls, d):
        ls = d["lengthscale"]
        ls = ls[0] if len(ls) == 1 else tuple(ls)
        return cls(d["family"], d["amplitude"], ls, d["exponent"], d["nu"])


def _sqdiff(X1, X2):
    return (X1[:, None, :] - X2[None, :, :]) ** 2


def _from_sqdiff(kernel, D2):
    """Kernel matrix from per-dimension squared differences ``D2`` (n1, n2, d)."""
    s2 = kernel.amplitude**2
    if kernel.family == "power_exponential":
        dist = np.sqrt(D2.sum(-1))
        return s2 * np.exp(-(dist**kernel.exponent) / (2 * kernel.ls[0] ** 2))
    r2 = (D2 / kernel.ls**2).sum(-1)
    if kernel.family == "rbf":
        return s2 * np.exp(-0.5 * r2)
    r = np.sqrt(r2)
    if kernel.nu == 1.5:
        return s2 * (1 + _SQRT3 * r) * np.exp(-_SQRT3 * r)
    return s2 * (1 + _SQRT5 * r + 5.0 * r2 / 3.0) * np.exp(-_SQRT5 * r)


def gram(kernel: Kernel, X1, X2=None) -> np.ndarray:
    X1 = as_2d(X1)
    X2 = X1 if X2 is None else as_2d(X2, X1.shape[1])
    return _from_sqdiff(kernel, _sqdiff(X1, X2))


def kernel_eval(kernel: Kernel, x, x_prime) -> float:
    return float(gram(kernel, np.atleast_1d(x), np.atleast_1d(x_prime))[0, 0])


def _kernel_grads(kernel, D2, K):
    """dK/d(hyperparameter) in the optimizer's coordinates.

    Coordinates: log amplitude, log lengthscale(s), then the raw exponent for
    ``power_exponential``.
    """
    grads = [2.0 * K]
    s2 = kernel.amplitude**2
    ls = kernel.ls
    if kernel.family == "power_exponential":
        dist = np.sqrt(D2.sum(-1))
        l2 = ls[0] ** 2
        dr = dist**kernel.exponent
        grads.append(K * dr / l2)
        with np.errstate(divide="ignore", invalid="ignore"):
            logd = np.where(dist > 0, np.log(np.where(dist > 0, dist, 1.0)), 0.0)
        grads.append(-K * dr * logd / (2 * l2))
        return grads
    scaled = D2 / ls**2
    r2 = scaled.sum(-1)
    if kernel.family == "rbf":
        factor = K
    elif kernel.nu == 1.5:
        factor = 3.0 * s2 * np.exp(-_SQRT3 * np.sqrt(r2))
    else:
        r = np.sqrt(r2)
        factor = (5.0 / 3.0) * s2 * (1 + _SQRT5 * r) * np.exp(-_SQRT5 * r)
    if ls.size == 1:
        grads.append(factor * r2)
    else:
        grads.extend(factor * scaled[..., j] for j in range(ls.size))
    return grads


def _pack(kernel):
    vec = [np.log(kernel.amplitude), *np.log(kernel.ls)]
    if kernel.family == "power_exponential":
        vec.append(kernel.exponent)
    return np.array(vec)


def _unpack(template, vec):
    n_ls = template.ls.size
    ls = np.exp(vec[1 : 1 + n_ls])
    kw = dict(amplitude=float(np.exp(vec[0])), lengthscale=float(ls[0]) if n_ls == 1 else tuple(ls))
    if template.family == "power_exponential":
        kw["exponent"] = float(vec[1 + n_ls])
    return replace(template, **kw)


def _factor(K, amplitude, ladder=JITTER_LADDER):
    """Cholesky of ``K + j * amplitude^2 * I`` for the first ``j`` on the ladder that works."""
    n = K.shape[0]
    for rel in ladder:
        jitter = rel * amplitude**2
        try:
            L = cholesky(K + jitter * np.eye(n), lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            continue
        return L, jitter
    raise NumericalError(f"kernel matrix not positive definite even with jitter {ladder[-1]:g}")


def _lml(y, L):
    alpha = cho_solve((L, True), y, check_finite=False)
    n = y.size
    value = -0.5 * y @ alpha - np.log(np.diag(L)).sum() - 0.5 * n * np.log(2 * np.pi)
    return value, alpha


class GaussianProcess(RegressorMixin, BaseEstimator):
    """Noise-free GP regressor with a zero prior mean.

    Parameters
    ----------
    kernel : str or Kernel, default="rbf"
        Kernel family name, or a :class:`Kernel` whose hyperparameters seed
        the optimizer (or are used as-is with ``optimize=False``).
    nu : float, default=2.5
        Matern smoothness when ``kernel="matern"``.
    ard : bool, default=True
        One lengthscale per input dimension (rbf and matern only).
    restarts : int, default=10
        Number of optimizer starts.  The first uses a data-driven guess, the
        rest are drawn log-uniformly inside the hyperparameter bounds.
    jitter : float, default=1e-12
        Starting diagonal jitter relative to the squared amplitude.  It is
        raised by decades up to 1e-6 when the Cholesky factorization fails.
    optimize : bool, default=True
    random_state : int, default=0
    """

    def __init__(self, kernel="rbf", nu=2.5, ard=True, restarts=10, jitter=1e-12,
                 optimize=True, random_state=0):
        self.kernel = kernel
        self.nu = nu
        self.ard = ard
        self.restarts = restarts
        self.jitter = jitter
        self.optimize = optimize
        self.random_state = random_state

    def _ladder(self):
        return tuple(j for j in JITTER_LADDER if j >= self.jitter) or (self.jitter,)

    def _initial_kernel(self, X, y):
        if isinstance(self.kernel, Kernel):
            return self.kernel
        d = X.shape[1]
        span = np.ptp(X, axis=0)
        span[span == 0] = 1.0
        amp = float(np.sqrt(np.mean(y**2))) or 1.0
        if self.kernel == "power_exponential":
            return Kernel("power_exponential", amp, float(span.mean() / 2), 1.5)
        ls = tuple(span / 2) if (self.ard and d > 1) else float(span.mean() / 2)
        return Kernel(self.kernel, amp, ls, nu=self.nu)

    def _bounds(self, template, X, y):
        span = np.ptp(X, axis=0)
        span[span == 0] = 1.0
        scale = float(np.sqrt(np.mean(y**2))) or 1.0
        bounds = [(np.log(1e-5 * scale), np.log(1e3 * scale))]
        if template.ls.size == 1:
            s = float(span.mean())
            bounds.append((np.log(1e-2 * s), np.log(1e2 * s)))
        else:
            bounds.extend((np.log(1e-2 * s), np.log(1e2 * s)) for s in span)
        if template.family == "power_exponential":
            bounds.append((0.1, 2.0))
        return np.array(bounds)

    def _objective(self, vec, template, y, D2):
        kernel = _unpack(template, vec)
        K = _from_sqdiff(kernel, D2)
        try:
            L, jitter = _factor(K, kernel.amplitude, self._ladder())
        except NumericalError:
            return 1e25, np.zeros_like(vec)
        value, alpha = _lml(y, L)
        Kinv = cho_solve((L, True), np.eye(y.size), check_finite=False)
        inner = np.outer(alpha, alpha) - Kinv
        grads = _kernel_grads(kernel, D2, K)
        # the relative jitter scales with amplitude^2 as well
        grads[0] = grads[0] + 2.0 * jitter * np.eye(y.size)
        g = np.array([0.5 * np.einsum("ij,ji->", inner, dK) for dK in grads])
        return -value, -g

    def fit(self, X, y):
        X = as_2d(X)
        y = np.asarray(y, dtype=float).ravel()
        if X.shape[0] != y.size:
            raise ValidationError("X and y differ in length")
        if X.shape[0] < 2:
            raise ValidationError("need at least 2 training points")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ValidationError("training data must be finite")
        uniq, inverse = np.unique(X, axis=0, return_inverse=True)
        if uniq.shape[0] < X.shape[0]:
            warnings.warn("duplicate training inputs collapsed to their mean target", stacklevel=2)
            inverse = inverse.ravel()
            y = np.bincount(inverse, weights=y) / np.bincount(inverse)
            X = uniq
        self.n_features_in_ = X.shape[1]
        self.X_train_ = X
        self.y_train_ = y
        template = self._initial_kernel(X, y)
        if template.family != "power_exponential" and template.ls.size not in (1, X.shape[1]):
            raise ValidationError("lengthscale count does not match input dimension")
        if self.optimize:
            template = self._optimize(template, X, y)
        self.kernel_ = template
        self._refactor()
        return self

    def _optimize(self, template, X, y):
        D2 = _sqdiff(X, X)
        bounds = self._bounds(template, X, y)
        rng = np.random.default_rng(self.random_state)
        starts = [np.clip(_pack(template), bounds[:, 0], bounds[:, 1])]
        for _ in range(max(int(self.restarts), 1) - 1):
            starts.append(rng.uniform(bounds[:, 0], bounds[:, 1]))
        best = None
        for x0 in starts:
            res = minimize(self._objective, x0, args=(template, y, D2), jac=True,
                           method="L-BFGS-B", bounds=bounds)
            if best is None or res.fun < best.fun:
                best = res
        if best.fun >= 1e25:
            raise NumericalError("no restart produced a positive definite kernel matrix")
        self.optimizer_result_ = best
        return _unpack(template, best.x)

    def _refactor(self):
        K = gram(self.kernel_, self.X_train_)
        self.L_, self.jitter_ = _factor(K, self.kernel_.amplitude, self._ladder())
        self.lml_, self.alpha_ = _lml(self.y_train_, self.L_)

    def log_marginal_likelihood(self, kernel=None):
        """LML of the training data, at ``kernel`` or at the fitted kernel."""
        check_is_fitted(self, "kernel_")
        if kernel is None:
            return float(self.lml_)
        K = gram(kernel, self.X_train_)
        L, _ = _factor(K, kernel.amplitude, self._ladder())
        return float(_lml(self.y_train_, L)[0])

    def predict(self, X, return_std=False, return_cov=False):
        check_is_fitted(self, "kernel_")
        X = as_2d(X, self.n_features_in_)
        Ks = gram(self.kernel_, X, self.X_train_)
        mean = Ks @ self.alpha_
        if not (return_std or return_cov):
            return mean
        V = solve_triangular(self.L_, Ks.T, lower=True, check_finite=False)
        if return_cov:
            cov = gram(self.kernel_, X) - V.T @ V
            return mean, 0.5 * (cov + cov.T)
        var = self.kernel_.amplitude**2 - np.einsum("ij,ij->j", V, V)
        return mean, np.sqrt(np.maximum(var, 0.0))

    def to_dict(self):
        check_is_fitted(self, "kernel_")
        return {
            "kind": "gp",
            "kernel": self.kernel_.to_dict(),
            "jitter": float(self.jitter_),
            "X_train": self.X_train_.tolist(),
            "y_train": self.y_train_.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        kernel = Kernel.from_dict(d["kernel"])
        model = cls(kernel=kernel, optimize=False)
        model.kernel_ = kernel
        model.X_train_ = np.asarray(d["X_train"], dtype=float)
        model.y_train_ = np.asarray(d["y_train"], dtype=float)
        model.n_features_in_ = model.X_train_.shape[1]
        K = gram(kernel, model.X_train_)
        model.jitter_ = float(d["jitter"])
        model.L_ = cholesky(K + model.jitter_ * np.eye(K.shape[0]), lower=True)
        model.lml_, model.alpha_ = _lml(model.y_train_, model.L_)
        return model

    def save(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)
