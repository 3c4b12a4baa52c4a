"""Posterior targets over surrogates, summaries, range extension and validation.

Single-level targets score one parameter vector against one or more cases
(several cases give a pooled calibration).  Hierarchical targets give every
case its own parameter vector drawn from a per-parameter normal population
whose mean and sd are sampled too.  Internally the per-group parameters are
written as ``theta_ij = mu_j + sigma_j * eta_ij`` with ``eta_ij ~ N(0, 1)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from .core import NumericalError, TransientCase, ValidationError
from .covest import CovarianceModel, regularize_cov
from .sampler import TargetDensity, diagnostics, pooled, rhat, sample

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


class DiagnosticsError(NumericalError):
    def __init__(self, message, rhat=None):
        super().__init__(message)
        self.rhat = rhat


# ----------------------------------------------------------------------------
# priors


@dataclass(frozen=True)
class Uniform:
    low: float
    high: float

    def __post_init__(self):
        if not (np.isfinite(self.low) and np.isfinite(self.high) and self.low < self.high):
            raise ValidationError(f"uniform law needs finite low < high, got ({self.low}, {self.high})")

    @property
    def support(self):
        return (float(self.low), float(self.high))

    def logpdf(self, x):
        x = np.asarray(x, dtype=float)
        inside = (x > self.low) & (x < self.high)
        return np.where(inside, -np.log(self.high - self.low), -np.inf)

    def dlogpdf(self, x):
        return np.zeros_like(np.asarray(x, dtype=float))

    def to_dict(self):
        return {"law": "uniform", "low": float(self.low), "high": float(self.high)}


@dataclass(frozen=True)
class Normal:
    mean: float
    sd: float

    def __post_init__(self):
        if not (np.isfinite(self.mean) and np.isfinite(self.sd) and self.sd > 0):
            raise ValidationError(f"normal law needs finite mean and sd > 0, got ({self.mean}, {self.sd})")

    @property
    def support(self):
        return (-np.inf, np.inf)

    def logpdf(self, x):
        z = (np.asarray(x, dtype=float) - self.mean) / self.sd
        return -0.5 * z * z - np.log(self.sd) - 0.5 * _LOG_2PI

    def dlogpdf(self, x):
        return -(np.asarray(x, dtype=float) - self.mean) / self.sd**2

    def to_dict(self):
        return {"law": "normal", "mean": float(self.mean), "sd": float(self.sd)}


def law_from_dict(d):
    kind = d.get("law")
    if kind == "uniform":
        return Uniform(float(d["low"]), float(d["high"]))
    if kind == "normal":
        return Normal(float(d["mean"]), float(d["sd"]))
    raise ValidationError(f"unknown prior law {kind!r}")


@dataclass(frozen=True)
class PriorSpec:
    """Independent per-parameter laws, plus hyperprior laws for hierarchical use.

    ``hyper_mean[j]`` and ``hyper_sd[j]`` are the laws of the population mean
    and sd of parameter ``j``; the sd law must live on (0, inf).
    """

    laws: tuple
    names: tuple = None
    hyper_mean: tuple = None
    hyper_sd: tuple = None

    def __post_init__(self):
        laws = tuple(self.laws)
        if not laws:
            raise ValidationError("need at least one parameter law")
        object.__setattr__(self, "laws", laws)
        names = tuple(self.names) if self.names is not None else tuple(f"theta{i}" for i in range(len(laws)))
        if len(names) != len(laws):
            raise ValidationError("names and laws differ in length")
        object.__setattr__(self, "names", names)
        for attr in ("hyper_mean", "hyper_sd"):
            v = getattr(self, attr)
            if v is not None:
                v = tuple(v)
                if len(v) != len(laws):
                    raise ValidationError(f"{attr} needs one law per parameter")
                object.__setattr__(self, attr, v)
        if self.hyper_sd is not None:
            for j, law in enumerate(self.hyper_sd):
                if law.support[0] < 0 or not isinstance(law, Uniform):
                    raise ValidationError(f"hyper_sd[{j}]: support must lie inside (0, inf)")

    @property
    def dim(self):
        return len(self.laws)

    @property
    def bounds(self):
        return np.array([law.support for law in self.laws], dtype=float)

    @property
    def hierarchical(self):
        return self.hyper_mean is not None and self.hyper_sd is not None

    def logpdf(self, theta):
        return float(sum(law.logpdf(t) for law, t in zip(self.laws, theta)))

    def dlogpdf(self, theta):
        return np.array([law.dlogpdf(t) for law, t in zip(self.laws, theta)], dtype=float)

    @classmethod
    def uniform(cls, bounds, names=None):
        """Independent uniform laws over ``bounds`` (shape (d, 2))."""
        return cls(tuple(Uniform(float(a), float(b)) for a, b in np.asarray(bounds, dtype=float)),
                   names)

    @classmethod
    def default_hierarchical(cls, d=4, names=None, mean_bounds=(0.0, 5.0), sd_bounds=(0.0, 1.0)):
        """Uniform mean and sd hyperpriors, replicated for every parameter."""
        mean = tuple(Uniform(*mean_bounds) for _ in range(d))
        sd = tuple(Uniform(*sd_bounds) for _ in range(d))
        return cls(mean, names, mean, sd)

    def to_dict(self):
        d = {"names": list(self.names), "laws": [law.to_dict() for law in self.laws]}
        if self.hyper_mean is not None:
            d["hyper_mean"] = [law.to_dict() for law in self.hyper_mean]
        if self.hyper_sd is not None:
            d["hyper_sd"] = [law.to_dict() for law in self.hyper_sd]
        return d

    @classmethod
    def from_dict(cls, d):
        if "laws" not in d:
            raise ValidationError("prior spec needs a 'laws' list")
        hm = d.get("hyper_mean")
        hs = d.get("hyper_sd")
        return cls(tuple(law_from_dict(x) for x in d["laws"]), d.get("names"),
                   tuple(law_from_dict(x) for x in hm) if hm is not None else None,
                   tuple(law_from_dict(x) for x in hs) if hs is not None else None)


# ----------------------------------------------------------------------------
# likelihood of one case


def _case_covariance(case, cov_mode, covariance):
    cov = covariance if covariance is not None else case.covariance
    if cov_mode not in ("full", "diagonal"):
        raise ValidationError(f"unknown cov_mode {cov_mode!r}")
    if cov is None:
        raise ValidationError(f"case {case.id}: no covariance available for cov_mode={cov_mode}")
    if isinstance(cov, CovarianceModel):
        if cov.mode == cov_mode:
            return cov
        return regularize_cov(cov.matrix, cov.nugget, cov_mode, case.id)
    return regularize_cov(np.asarray(cov, dtype=float), 0.0, cov_mode, case.id)


class CaseLikelihood:
    """Gaussian log-likelihood of one case's flattened observations.

    Parameters
    ----------
    surrogate : fitted :class:`~tdiuq.surrogate.Surrogate` (or any object with
        ``predict`` and, for gradients, ``predict_and_grad``)
    case : TransientCase
    cov_mode : {"full", "diagonal"}
        ``diagonal`` keeps only the variances of the case covariance.
    covariance : CovarianceModel or array, optional
        Overrides ``case.covariance``.
    include_emulator_cov : bool
        Add the surrogate's own predictive covariance (gp_pca only) to the
        observation covariance at every evaluation.  Such likelihoods carry
        no gradient.
    """

    def __init__(self, surrogate, case: TransientCase, cov_mode="full", covariance=None,
                 include_emulator_cov=False):
        self.surrogate = surrogate
        self.case = case
        self.y = np.asarray(case.flattened, dtype=float)
        self.cov = _case_covariance(case, cov_mode, covariance)
        self.cov_mode = cov_mode
        if self.cov.k != self.y.size:
            raise ValidationError(f"case {case.id}: covariance size {self.cov.k} != {self.y.size} outputs")
        n_out = getattr(surrogate, "n_outputs_", None)
        if n_out is not None and n_out != self.y.size:
            raise ValidationError(f"case {case.id}: surrogate emits {n_out} outputs, case has {self.y.size}")
        self.include_emulator_cov = bool(include_emulator_cov)
        self.has_gradient = bool(getattr(surrogate, "supports_gradient", False)) and not self.include_emulator_cov
        self._const = -0.5 * self.y.size * _LOG_2PI - 0.5 * self.cov.logdet()
        # fixed whitening operator: a scale vector when diagonal, else L^-1
        L = self.cov.cholesky
        if cov_mode == "diagonal" or np.count_nonzero(L - np.diag(np.diag(L))) == 0:
            self._w_diag = 1.0 / np.diag(L)
            self._W = None
        else:
            self._w_diag = None
            self._W = solve_triangular(L, np.eye(L.shape[0]), lower=True, check_finite=False)

    def _whiten(self, r):
        return r * self._w_diag if self._W is None else self._W @ r

    def _whiten_t(self, z):
        return z * self._w_diag if self._W is None else self._W.T @ z

    def __call__(self, theta) -> float:
        theta = np.asarray(theta, dtype=float)
        pred = self.surrogate.predict(theta)
        if self.include_emulator_cov:
            total = self.cov.total + self.surrogate.emulator_covariance(theta)
            cov = regularize_cov(0.5 * (total + total.T), 0.0, "full")
            z = cov.whiten(self.y - pred)
            return float(-0.5 * self.y.size * _LOG_2PI - 0.5 * cov.logdet() - 0.5 * z @ z)
        z = self._whiten(self.y - pred)
        return float(self._const - 0.5 * z @ z)

    def value_and_grad(self, theta):
        pred, J = self.surrogate.predict_and_grad(theta)
        z = self._whiten(self.y - pred)
        return float(self._const - 0.5 * z @ z), J.T @ self._whiten_t(z)


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def build_single_level_target(surrogate, case, cov_mode="full", priors: PriorSpec = None,
                              covariance=None, include_emulator_cov=False) -> TargetDensity:
    """Posterior of one parameter vector given one case (or several, pooled).

    ``surrogate``, ``case`` and ``covariance`` may be lists of equal length,
    in which case the log-likelihoods add up (a pooled calibration).  The
    target carries gradients when every surrogate supports them.
    """
    surrogates, cases = _as_list(surrogate), _as_list(case)
    if len(surrogates) != len(cases):
        raise ValidationError("need one surrogate per case")
    covs = _as_list(covariance) if covariance is not None else [None] * len(cases)
    if len(covs) != len(cases):
        raise ValidationError("need one covariance per case")
    if priors is None:
        raise ValidationError("priors are required")
    liks = [CaseLikelihood(s, c, cov_mode, v, include_emulator_cov)
            for s, c, v in zip(surrogates, cases, covs)]
    for s in surrogates:
        n_in = getattr(s, "n_features_in_", priors.dim)
        if n_in != priors.dim:
            raise ValidationError(f"surrogate takes {n_in} parameters, priors define {priors.dim}")
    lo, hi = priors.bounds[:, 0], priors.bounds[:, 1]

    def logp(theta):
        if np.any(theta <= lo) or np.any(theta >= hi):
            return -np.inf
        return priors.logpdf(theta) + sum(lik(theta) for lik in liks)

    def logp_and_grad(theta):
        if np.any(theta <= lo) or np.any(theta >= hi):
            return -np.inf, np.zeros_like(theta)
        value = priors.logpdf(theta)
        grad = priors.dlogpdf(theta)
        for lik in liks:
            v, g = lik.value_and_grad(theta)
            value += v
            grad = grad + g
        return value, grad

    grad_ok = all(lik.has_gradient for lik in liks)
    target = TargetDensity(logp_and_grad if grad_ok else None, priors.dim, priors.names,
                           priors.bounds, logp=logp)
    target.likelihoods = liks
    target.priors = priors
    return target


# ----------------------------------------------------------------------------
# hierarchical


@dataclass
class HierarchicalParams:
    hyper_mean: np.ndarray
    hyper_sd: np.ndarray
    per_group: np.ndarray

    def __post_init__(self):
        self.hyper_mean = np.asarray(self.hyper_mean, dtype=float)
        self.hyper_sd = np.asarray(self.hyper_sd, dtype=float)
        self.per_group = np.atleast_2d(np.asarray(self.per_group, dtype=float))
        d = self.hyper_mean.shape[-1]
        if self.hyper_sd.shape[-1] != d or self.per_group.shape[-1] != d:
            raise ValidationError("hyper-parameters and per-group parameters differ in dimension")
        if np.any(self.hyper_sd <= 0):
            raise ValidationError("hyper sd must be positive")
        if not np.all(np.isfinite(self.per_group)):
            raise ValidationError("per-group parameters must be finite")


class HierarchicalTarget(TargetDensity):
    """Joint density of (mu, sigma, eta) for a per-parameter normal hierarchy.

    The state vector is ``[mu (d), sigma (d), eta (G*d, group-major)]``.
    Use :meth:`unpack` to recover per-group parameters and
    :meth:`centered_logp` to score the equivalent centered form.
    """

    def __init__(self, likelihoods, priors: PriorSpec, group_ids):
        self.likelihoods = list(likelihoods)
        self.priors = priors
        self.group_ids = tuple(group_ids)
        self.d = priors.dim
        self.G = len(self.likelihoods)
        d, G = self.d, self.G
        names = ([f"mu_{n}" for n in priors.names] + [f"sigma_{n}" for n in priors.names]
                 + [f"eta_{g}_{n}" for g in self.group_ids for n in priors.names])
        bounds = np.vstack([
            [law.support for law in priors.hyper_mean],
            [law.support for law in priors.hyper_sd],
            np.tile([-np.inf, np.inf], (G * d, 1)),
        ])
        grad_ok = all(lik.has_gradient for lik in self.likelihoods)
        super().__init__(self._logp_and_grad if grad_ok else None, (2 + G) * d, names, bounds,
                         logp=self._logp)
        laws = list(priors.hyper_mean) + list(priors.hyper_sd)
        # flat hyperpriors: constant density inside the support, zero gradient
        self._flat_hyper = (sum(-np.log(law.high - law.low) for law in laws)
                            if all(isinstance(law, Uniform) for law in laws) else None)

    def split(self, x):
        x = np.asarray(x, dtype=float)
        d = self.d
        return x[..., :d], x[..., d:2 * d], x[..., 2 * d:].reshape(x.shape[:-1] + (self.G, d))

    def unpack(self, x) -> HierarchicalParams:
        mu, sd, eta = self.split(x)
        return HierarchicalParams(mu, sd, mu + sd * eta)

    def per_group_draws(self, x):
        """Per-group parameters for an array of states, shape (..., G, d)."""
        mu, sd, eta = self.split(x)
        return mu[..., None, :] + sd[..., None, :] * eta

    def _hyper_logp(self, mu, sd):
        if self._flat_hyper is not None:
            return self._flat_hyper
        lp = sum(float(law.logpdf(m)) for law, m in zip(self.priors.hyper_mean, mu))
        lp += sum(float(law.logpdf(s)) for law, s in zip(self.priors.hyper_sd, sd))
        return lp

    def _in_support(self, mu, sd):
        b = self.bounds
        d = self.d
        return (np.all(mu > b[:d, 0]) and np.all(mu < b[:d, 1])
                and np.all(sd > b[d:2 * d, 0]) and np.all(sd < b[d:2 * d, 1]))

    def _logp(self, x):
        mu, sd, eta = self.split(x)
        if not self._in_support(mu, sd):
            return -np.inf
        theta = mu + sd * eta
        lp = self._hyper_logp(mu, sd) - 0.5 * float(np.sum(eta * eta)) - 0.5 * eta.size * _LOG_2PI
        return lp + sum(lik(theta[i]) for i, lik in enumerate(self.likelihoods))

    def _logp_and_grad(self, x):
        mu, sd, eta = self.split(x)
        if not self._in_support(mu, sd):
            return -np.inf, np.zeros_like(x)
        theta = mu + sd * eta
        lp = self._hyper_logp(mu, sd) - 0.5 * float(np.sum(eta * eta)) - 0.5 * eta.size * _LOG_2PI
        if self._flat_hyper is not None:
            g_mu, g_sd = np.zeros(self.d), np.zeros(self.d)
        else:
            g_mu = np.array([law.dlogpdf(m) for law, m in zip(self.priors.hyper_mean, mu)], dtype=float)
            g_sd = np.array([law.dlogpdf(s) for law, s in zip(self.priors.hyper_sd, sd)], dtype=float)
        g_eta = -eta.copy()
        for i, lik in enumerate(self.likelihoods):
            v, g = lik.value_and_grad(theta[i])
            lp += v
            g_mu += g
            g_sd += g * eta[i]
            g_eta[i] += g * sd
        return lp, np.concatenate([g_mu, g_sd, g_eta.ravel()])

    def centered_logp(self, mu, sd, theta) -> float:
        """Density of the centered form over (mu, sigma, theta_1..theta_G)."""
        mu, sd = np.asarray(mu, dtype=float), np.asarray(sd, dtype=float)
        theta = np.asarray(theta, dtype=float).reshape(self.G, self.d)
        if not self._in_support(mu, sd):
            return -np.inf
        z = (theta - mu) / sd
        lp = self._hyper_logp(mu, sd)
        lp += float(np.sum(-0.5 * z * z - np.log(sd) - 0.5 * _LOG_2PI))
        return lp + sum(lik(theta[i]) for i, lik in enumerate(self.likelihoods))

    def to_state(self, mu, sd, theta):
        """State vector corresponding to a centered point."""
        mu, sd = np.asarray(mu, dtype=float), np.asarray(sd, dtype=float)
        eta = (np.asarray(theta, dtype=float).reshape(self.G, self.d) - mu) / sd
        return np.concatenate([mu, sd, eta.ravel()])


def build_hierarchical_target(surrogates, cases, cov_mode="full", hyperpriors: PriorSpec = None,
                              covariances=None) -> HierarchicalTarget:
    """Joint posterior over hyper-means, hyper-sds and one parameter vector per case."""
    surrogates, cases = _as_list(surrogates), _as_list(cases)
    if len(cases) < 2:
        raise ValidationError("a hierarchical model needs at least 2 groups")
    if len(surrogates) != len(cases):
        raise ValidationError("need one surrogate per group")
    if hyperpriors is None:
        hyperpriors = PriorSpec.default_hierarchical(getattr(surrogates[0], "n_features_in_", 4))
    if not hyperpriors.hierarchical:
        raise ValidationError("hyperpriors need hyper_mean and hyper_sd laws")
    for i, s in enumerate(surrogates):
        n_in = getattr(s, "n_features_in_", hyperpriors.dim)
        if n_in != hyperpriors.dim:
            raise ValidationError(f"group {i}: surrogate takes {n_in} parameters, expected {hyperpriors.dim}")
    covs = _as_list(covariances) if covariances is not None else [None] * len(cases)
    liks = [CaseLikelihood(s, c, cov_mode, v) for s, c, v in zip(surrogates, cases, covs)]
    return HierarchicalTarget(liks, hyperpriors, [c.id for c in cases])


# ----------------------------------------------------------------------------
# summaries


def find_mode(target: TargetDensity, init=None, restarts=5, seed=0):
    """Maximize the log-density (in unconstrained coordinates); returns the constrained mode."""
    rng = np.random.default_rng(seed)
    best = None
    starts = [] if init is None else [target.to_unconstrained(np.asarray(init, dtype=float))]
    starts += [rng.uniform(-2, 2, target.dim) for _ in range(restarts)]
    for z0 in starts:
        if target.has_gradient:
            def f(z):
                v, g = target.unconstrained_logp_and_grad(z)
                return (-v, -g) if np.isfinite(v) else (1e300, np.zeros_like(z))
            res = minimize(f, z0, jac=True, method="L-BFGS-B")
        else:
            def f(z):
                v = target.unconstrained_logp(z)
                return -v if np.isfinite(v) else 1e300
            res = minimize(f, z0, method="Nelder-Mead",
                           options={"maxiter": 4000 * target.dim, "xatol": 1e-8, "fatol": 1e-10})
        if best is None or res.fun < best.fun:
            best = res
    return target.to_constrained(best.x)


def summarize_hyper(chains, names=None, rhat_max=1.05, override=False) -> dict:
    """Posterior means of the hyper-parameters and the implied normal law.

    Returns ``{param: {"mu": m, "sigma": s, "predictive": {"law": "normal",
    "mean": m, "sd": s}}}`` using columns named ``mu_<param>`` and
    ``sigma_<param>``.  Raises :class:`DiagnosticsError` when any hyper
    column has R-hat at or above ``rhat_max`` unless ``override`` is set.
    Constant columns (undefined R-hat) do not count as failures.
    """
    names = tuple(names) if names is not None else tuple(chains[0].names)
    params = [n[3:] for n in names if n.startswith("mu_")]
    if not params:
        raise ValidationError("no mu_<param> columns in the chains")
    cols = [names.index(f"mu_{p}") for p in params] + [names.index(f"sigma_{p}") for p in params]
    draws = pooled(chains)
    if len(chains) >= 2 and draws.shape[0] // len(chains) >= 4:
        r = rhat(chains)[cols]
        bad = [names[c] for c, v in zip(cols, r) if np.isfinite(v) and v >= rhat_max]
        if bad and not override:
            raise DiagnosticsError(f"R-hat >= {rhat_max} for {', '.join(bad)}", r)
        if bad:
            log.warning("summarizing unconverged hyper-parameters: %s", ", ".join(bad))
    # sort before averaging so the result does not depend on chain order
    means = np.sort(draws[:, cols], axis=0).mean(axis=0)
    d = len(params)
    out = {}
    for j, p in enumerate(params):
        m, s = float(means[j]), float(means[d + j])
        out[p] = {"mu": m, "sigma": s, "predictive": {"law": "normal", "mean": m, "sd": s}}
    return out


def posterior_summary(chains, names=None, level=0.95) -> dict:
    """Per-column mean, sd, median and central interval."""
    draws = pooled(chains)
    names = tuple(names) if names is not None else tuple(chains[0].names)
    a = (1 - level) / 2
    q = np.quantile(draws, [a, 0.5, 1 - a], axis=0)
    return {n: {"mean": float(draws[:, j].mean()), "sd": float(draws[:, j].std(ddof=1)),
                "median": float(q[1, j]), "lower": float(q[0, j]), "upper": float(q[2, j])}
            for j, n in enumerate(names)}


# ----------------------------------------------------------------------------
# iterative range extension


@dataclass
class ResampleResult:
    chains: list
    bounds: np.ndarray
    bound_history: list
    rounds: int
    status: str
    surrogate: object = None
    messages: list = field(default_factory=list)


def boundary_mass(draws, bounds, edge=0.05):
    """Fraction of draws within ``edge`` of the range width of each bound, shape (d, 2)."""
    draws = np.atleast_2d(draws)
    bounds = np.asarray(bounds, dtype=float)
    width = bounds[:, 1] - bounds[:, 0]
    low = np.mean(draws < bounds[:, 0] + edge * width, axis=0)
    high = np.mean(draws > bounds[:, 1] - edge * width, axis=0)
    return np.column_stack([low, high])


def extend_bounds(bounds, mass, threshold, factor=0.5, floor=None):
    """New bounds after pushing out every side whose mass exceeds ``threshold``.

    Each flagged side moves by ``factor`` times the current width; lower
    bounds never cross ``floor`` (per parameter, or None).  Returns the new
    bounds and whether anything changed.
    """
    bounds = np.array(bounds, dtype=float)
    new = bounds.copy()
    width = bounds[:, 1] - bounds[:, 0]
    floor = np.full(len(bounds), -np.inf) if floor is None else np.broadcast_to(
        np.asarray(floor, dtype=float), (len(bounds),))
    for j in range(len(bounds)):
        if mass[j, 0] > threshold:
            new[j, 0] = max(bounds[j, 0] - factor * width[j], floor[j])
        if mass[j, 1] > threshold:
            new[j, 1] = bounds[j, 1] + factor * width[j]
    return new, bool(np.any(new != bounds))


def iterative_resample(simulator, spec, case: TransientCase, bounds, max_rounds=3,
                       mass_threshold=0.05, edge=0.05, factor=0.5, floor=0.0, n_train=400,
                       cov_mode="diagonal", covariance=None, seed=0, surrogate_options=None,
                       sampler_options=None, names=None) -> ResampleResult:
    """Retrain, resample and widen the prior box until the posterior sits inside it.

    Round 0 trains an MLP surrogate on an LHS design over ``bounds``,
    samples the posterior under uniform priors on the same box and checks
    the draws near each side.  Every side carrying more than
    ``mass_threshold`` of the draws within ``edge`` of its width moves out by
    ``factor`` times the width, and the next round starts.  The loop stops
    when no side moves or after ``max_rounds`` extensions; in the latter
    case with mass still at a bound the status is ``"warning"``.

    ``simulator(theta, spec)`` returns the flattened series.
    """
    from .surrogate import Surrogate, build_training_set

    surrogate_options = dict(surrogate_options or {})
    sampler_options = dict(sampler_options or {})
    bounds = np.array(bounds, dtype=float)
    history = [bounds.copy()]
    messages = []
    rnd = 0
    while True:
        train = build_training_set(simulator, spec, n_train, bounds, seed + 7919 * rnd)
        val = build_training_set(simulator, spec, max(50, n_train // 8), bounds,
                                 seed + 7919 * rnd + 1, design="uniform")
        model = Surrogate("mlp", random_state=seed + rnd, **surrogate_options)
        model.fit(train.inputs, train.outputs, val.inputs, val.outputs)
        priors = PriorSpec.uniform(bounds, names)
        target = build_single_level_target(model, case, cov_mode, priors, covariance)
        chains = sample(target, seed=seed + rnd, **sampler_options)
        mass = boundary_mass(pooled(chains), bounds, edge)
        flagged = mass > mass_threshold
        if not flagged.any():
            return ResampleResult(chains, bounds, history, rnd, "ok", model, messages)
        if rnd >= max_rounds:
            msg = f"round {rnd}: posterior mass still at a bound after {max_rounds} extension rounds"
            log.warning(msg)
            messages.append(msg)
            return ResampleResult(chains, bounds, history, rnd, "warning", model, messages)
        new, changed = extend_bounds(bounds, mass, mass_threshold, factor, floor)
        if not changed:
            # only sides pinned at the floor carry mass; nothing left to extend
            messages.append(f"round {rnd}: mass at a floored bound; bounds kept")
            return ResampleResult(chains, bounds, history, rnd, "ok", model, messages)
        messages.append(f"round {rnd}: bounds extended to {new.tolist()}")
        bounds = new
        history.append(bounds.copy())
        rnd += 1


# ----------------------------------------------------------------------------
# validation


def _error_stats(err):
    err = np.asarray(err, dtype=float).ravel()
    q = np.quantile(err, [0.025, 0.25, 0.5, 0.75, 0.975])
    return {"n": int(err.size), "mean": float(err.mean()), "sd": float(err.std(ddof=1)) if err.size > 1 else 0.0,
            "mae": float(np.abs(err).mean()), "rmse": float(np.sqrt(np.mean(err * err))),
            "q025": float(q[0]), "q25": float(q[1]), "median": float(q[2]), "q75": float(q[3]),
            "q975": float(q[4])}


def theta_samples(source: dict, n_draws=200, seed=0):
    """Parameter vectors implied by a source description.

    ``{"kind": "point", "theta": [...]}``, ``{"kind": "normal", "mean": [...],
    "sd": [...]}`` or ``{"kind": "chains", "draws": array (S, d)}``; chains
    are thinned evenly to ``n_draws``.
    """
    kind = source.get("kind")
    if kind == "point":
        return np.atleast_2d(np.asarray(source["theta"], dtype=float))
    if kind == "normal":
        mean = np.asarray(source["mean"], dtype=float)
        sd = np.asarray(source["sd"], dtype=float)
        rng = np.random.default_rng(seed)
        return mean + sd * rng.standard_normal((n_draws, mean.size))
    if kind == "chains":
        draws = np.atleast_2d(np.asarray(source["draws"], dtype=float))
        idx = np.unique(np.linspace(0, draws.shape[0] - 1, min(n_draws, draws.shape[0])).astype(int))
        return draws[idx]
    raise ValidationError(f"unknown theta source {kind!r}")


def _case_errors(case, simulator, thetas):
    y = np.asarray(case.flattened, dtype=float)
    return np.array([y - np.asarray(simulator(t, case), dtype=float) for t in thetas])


def validate_posterior(source: dict, train_cases: Sequence, test_cases: Sequence, simulator,
                       prior_source: dict | None = None, n_draws=200, seed=0) -> dict:
    """Observation-minus-prediction error distributions per case and split.

    ``simulator(theta, case)`` returns the flattened prediction for a case.
    A per-group source (``{"kind": "per_case", "sources": {case_id: src}}``)
    uses a different source for each case.  When ``prior_source`` is given
    every case also reports the prior errors and the reductions in |mean|
    and sd.
    """
    report = {"source": source.get("kind"), "n_draws": int(n_draws), "seed": int(seed)}
    splits = [("train", list(train_cases)), ("test", list(test_cases))]
    for split, cases in splits:
        if not cases:
            continue
        section = {}
        all_post, all_prior = [], []
        for case in cases:
            src = source["sources"][case.id] if source.get("kind") == "per_case" else source
            err = _case_errors(case, simulator, theta_samples(src, n_draws, seed))
            entry = {"posterior": _error_stats(err)}
            all_post.append(err.ravel())
            if prior_source is not None:
                perr = _case_errors(case, simulator, theta_samples(prior_source, n_draws, seed))
                all_prior.append(perr.ravel())
                entry["prior"] = _error_stats(perr)
                entry["abs_mean_reduction"] = abs(entry["prior"]["mean"]) - abs(entry["posterior"]["mean"])
                entry["sd_reduction"] = entry["prior"]["sd"] - entry["posterior"]["sd"]
            section[case.id] = entry
        overall = {"posterior": _error_stats(np.concatenate(all_post))}
        if all_prior:
            overall["prior"] = _error_stats(np.concatenate(all_prior))
        section["_all"] = overall
        report[split] = section
    return report


def run_chains(target, **sampler_options):
    """Sample a built target; NUTS with gradients, random-walk Metropolis otherwise."""
    chains = sample(target, **sampler_options)
    return chains, diagnostics(chains)
