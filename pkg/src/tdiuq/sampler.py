"""Gradient-based MCMC (NUTS), a random-walk fallback and convergence diagnostics.

Sampling happens in an unconstrained space.  Parameters with interval
support ``(a, b)`` use ``x = a + (b - a) * logistic(z)``; half-bounded
``(a, inf)`` uses ``x = a + exp(z)``.  Reported draws are always in the
constrained space.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.special import expit

from .core import NumericalError, ValidationError

log = logging.getLogger(__name__)

DIVERGENCE_THRESHOLD = 1000.0


class SamplingError(NumericalError):
    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


class TargetDensity:
    """Log-density over a constrained parameter space.

    Parameters
    ----------
    logp_and_grad : callable or None
        ``f(x) -> (logp, grad)`` in the constrained space.
    dim : int
    names : sequence of str, optional
    bounds : array of shape (dim, 2), optional
        Use ``-inf``/``inf`` for open sides.
    logp : callable, optional
        ``f(x) -> logp``; required when ``logp_and_grad`` is None
        (gradient-free targets).
    """

    def __init__(self, logp_and_grad: Optional[Callable], dim: int, names=None, bounds=None,
                 logp: Optional[Callable] = None):
        if logp_and_grad is None and logp is None:
            raise ValidationError("need logp_and_grad or logp")
        self._lg = logp_and_grad
        self._logp = logp
        self.dim = int(dim)
        self.names = tuple(names) if names is not None else tuple(f"x{i}" for i in range(self.dim))
        if len(self.names) != self.dim:
            raise ValidationError("names length differs from dim")
        if bounds is None:
            bounds = np.tile([-np.inf, np.inf], (self.dim, 1))
        self.bounds = np.asarray(bounds, dtype=float).reshape(self.dim, 2)
        if np.any(self.bounds[:, 0] >= self.bounds[:, 1]):
            raise ValidationError("bounds need low < high")
        lo_f, hi_f = np.isfinite(self.bounds[:, 0]), np.isfinite(self.bounds[:, 1])
        self._interval = lo_f & hi_f
        self._lower = lo_f & ~hi_f
        self._upper = ~lo_f & hi_f

    @property
    def has_gradient(self):
        return self._lg is not None

    def logp(self, x) -> float:
        x = np.asarray(x, dtype=float)
        if self._logp is not None:
            return float(self._logp(x))
        return float(self._lg(x)[0])

    def grad_logp(self, x) -> np.ndarray:
        if self._lg is None:
            raise ValidationError("target has no gradient")
        return np.asarray(self._lg(np.asarray(x, dtype=float))[1], dtype=float)

    def logp_and_grad(self, x):
        v, g = self._lg(np.asarray(x, dtype=float))
        return float(v), np.asarray(g, dtype=float)

    def to_constrained(self, z):
        z = np.asarray(z, dtype=float)
        x = z.copy()
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        m = self._interval
        x[..., m] = lo[m] + (hi[m] - lo[m]) * expit(z[..., m])
        m = self._lower
        x[..., m] = lo[m] + np.exp(z[..., m])
        m = self._upper
        x[..., m] = hi[m] - np.exp(z[..., m])
        return x

    def to_unconstrained(self, x):
        x = np.asarray(x, dtype=float)
        z = x.copy()
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        m = self._interval
        u = (x[..., m] - lo[m]) / (hi[m] - lo[m])
        z[..., m] = np.log(u) - np.log1p(-u)
        m = self._lower
        z[..., m] = np.log(x[..., m] - lo[m])
        m = self._upper
        z[..., m] = np.log(hi[m] - x[..., m])
        return z

    def _jacobian(self, z):
        """dx/dz, log|dx/dz| summed, and d log|dx/dz| / dz."""
        dxdz = np.ones_like(z)
        dlogj = np.zeros_like(z)
        lo, hi = self.bounds[:, 0], self.bounds[:, 1]
        m = self._interval
        s = expit(z[m])
        dxdz[m] = (hi[m] - lo[m]) * s * (1 - s)
        dlogj[m] = 1 - 2 * s
        m = self._lower
        dxdz[m] = np.exp(z[m])
        dlogj[m] = 1.0
        m = self._upper
        dxdz[m] = -np.exp(z[m])
        dlogj[m] = 1.0
        with np.errstate(divide="ignore"):
            logj = float(np.sum(np.log(np.abs(dxdz))))
        return dxdz, logj, dlogj

    def unconstrained_logp(self, z) -> float:
        z = np.asarray(z, dtype=float)
        with np.errstate(over="ignore"):
            x = self.to_constrained(z)
            _, logj, _ = self._jacobian(z)
        if not (np.all(np.isfinite(x)) and np.isfinite(logj)):
            return -np.inf
        return self.logp(x) + logj

    def unconstrained_logp_and_grad(self, z):
        z = np.asarray(z, dtype=float)
        with np.errstate(over="ignore"):
            x = self.to_constrained(z)
            dxdz, logj, dlogj = self._jacobian(z)
        if not (np.all(np.isfinite(x)) and np.isfinite(logj)):
            return -np.inf, np.zeros_like(z)
        value, g = self.logp_and_grad(x)
        return value + logj, g * dxdz + dlogj


@dataclass
class PosteriorChain:
    draws: np.ndarray
    names: tuple
    warmup: int
    seed: object
    divergences: int = 0
    warmup_divergences: int = 0
    step_size: float = float("nan")
    inv_metric: np.ndarray = None
    accept_stat: np.ndarray = None
    tree_depth: np.ndarray = None
    logp: np.ndarray = None
    method: str = "nuts"
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.draws = np.atleast_2d(np.asarray(self.draws, dtype=float))
        if self.draws.shape[0] < 1 or not np.all(np.isfinite(self.draws)):
            raise ValidationError("a chain needs at least one finite draw")

    @property
    def n_draws(self):
        return self.draws.shape[0]

    def column(self, name):
        return self.draws[:, self.names.index(name)]


# ----------------------------------------------------------------------------
# NUTS


@dataclass
class _State:
    z: np.ndarray
    p: np.ndarray
    logp: float
    grad: np.ndarray


@dataclass
class _Tree:
    minus: _State
    plus: _State
    proposal: _State
    log_w: float
    rho: np.ndarray
    n_leapfrog: int
    sum_accept: float
    valid: bool
    divergent: bool = False


def _no_uturn(rho, p_sharp_a, p_sharp_b):
    return float(p_sharp_a @ rho) > 0 and float(p_sharp_b @ rho) > 0


class _Nuts:
    def __init__(self, f, dim, rng, max_depth):
        self.f = f
        self.dim = dim
        self.rng = rng
        self.max_depth = max_depth
        self.inv_metric = np.ones(dim)

    def kinetic(self, p):
        return 0.5 * float(p @ (self.inv_metric * p))

    def leapfrog(self, s, eps):
        p = s.p + 0.5 * eps * s.grad
        z = s.z + eps * self.inv_metric * p
        with np.errstate(over="ignore", invalid="ignore"):
            logp, grad = self.f(z)
        if not (np.isfinite(logp) and np.all(np.isfinite(grad))):
            return _State(z, p, -np.inf, np.zeros_like(z))
        p = p + 0.5 * eps * grad
        return _State(z, p, logp, grad)

    def build(self, s, v, depth, eps, H0):
        if depth == 0:
            new = self.leapfrog(s, v * eps)
            H = -new.logp + self.kinetic(new.p) if np.isfinite(new.logp) else np.inf
            delta = H - H0
            if not np.isfinite(delta):
                delta = np.inf
            divergent = delta > DIVERGENCE_THRESHOLD
            accept = float(np.exp(min(0.0, -delta))) if np.isfinite(delta) else 0.0
            return _Tree(new, new, new, -delta, new.p.copy(), 1, accept, not divergent, divergent)
        first = self.build(s, v, depth - 1, eps, H0)
        if not first.valid:
            return first
        edge = first.plus if v > 0 else first.minus
        second = self.build(edge, v, depth - 1, eps, H0)
        n = first.n_leapfrog + second.n_leapfrog
        acc = first.sum_accept + second.sum_accept
        if not second.valid:
            second.n_leapfrog, second.sum_accept = n, acc
            return second
        log_w = np.logaddexp(first.log_w, second.log_w)
        proposal = first.proposal
        if np.log(self.rng.random()) < second.log_w - log_w:
            proposal = second.proposal
        left, right = (first, second) if v > 0 else (second, first)
        valid = self._check(left, right)
        return _Tree(left.minus, right.plus, proposal, log_w, first.rho + second.rho, n, acc, valid)

    def _check(self, left, right):
        """Generalized U-turn checks on a merged trajectory, including the subtree seams."""
        im = self.inv_metric
        rho = left.rho + right.rho
        if not _no_uturn(rho, im * left.minus.p, im * right.plus.p):
            return False
        if not _no_uturn(left.rho + right.minus.p, im * left.minus.p, im * right.minus.p):
            return False
        return _no_uturn(right.rho + left.plus.p, im * left.plus.p, im * right.plus.p)

    def transition(self, state, eps):
        p0 = self.rng.standard_normal(self.dim) / np.sqrt(self.inv_metric)
        start = _State(state.z, p0, state.logp, state.grad)
        H0 = -start.logp + self.kinetic(p0)
        traj = _Tree(start, start, start, 0.0, p0.copy(), 0, 0.0, True)
        sample = start
        depth = 0
        divergent = False
        n_leap, sum_acc = 0, 0.0
        while depth < self.max_depth:
            v = 1 if self.rng.random() < 0.5 else -1
            edge = traj.plus if v > 0 else traj.minus
            sub = self.build(edge, v, depth, eps, H0)
            n_leap += sub.n_leapfrog
            sum_acc += sub.sum_accept
            depth += 1
            if not sub.valid:
                divergent = sub.divergent
                break
            # biased progressive sampling favours the new subtree
            if np.log(self.rng.random()) < sub.log_w - traj.log_w:
                sample = sub.proposal
            left, right = (traj, sub) if v > 0 else (sub, traj)
            merged = _Tree(left.minus, right.plus, sample, np.logaddexp(traj.log_w, sub.log_w),
                           traj.rho + sub.rho, 0, 0.0, True)
            traj = merged
            if not self._check(left, right):
                break
        accept = sum_acc / max(n_leap, 1)
        return _State(sample.z, sample.p, sample.logp, sample.grad), accept, depth, divergent


class _DualAveraging:
    def __init__(self, eps, target, gamma=0.05, t0=10.0, kappa=0.75):
        self.target = target
        self.gamma, self.t0, self.kappa = gamma, t0, kappa
        self.restart(eps)

    def restart(self, eps):
        self.mu = np.log(10 * eps)
        self.h_bar = 0.0
        self.log_eps_bar = 0.0
        self.count = 0

    def update(self, accept):
        self.count += 1
        m = self.count
        w = 1.0 / (m + self.t0)
        self.h_bar = (1 - w) * self.h_bar + w * (self.target - accept)
        log_eps = self.mu - np.sqrt(m) / self.gamma * self.h_bar
        eta = m ** (-self.kappa)
        self.log_eps_bar = eta * log_eps + (1 - eta) * self.log_eps_bar
        return float(np.exp(log_eps))

    @property
    def final(self):
        return float(np.exp(self.log_eps_bar))


def _warmup_windows(n):
    """Stan-style adaptation windows: fast / doubling slow windows / fast."""
    if n < 20:
        return []
    if n < 150:
        init, term = int(0.15 * n), int(0.1 * n)
    else:
        init, term = 75, 50
    base = 25
    ends = []
    start = init
    size = base
    last = n - term
    while start < last:
        end = start + size
        if end + 2 * size > last:
            end = last
        ends.append(end)
        start = end
        size *= 2
    return ends


def _initial_step(nuts, state):
    eps = 1.0
    p = nuts.rng.standard_normal(nuts.dim) / np.sqrt(nuts.inv_metric)
    H0 = -state.logp + nuts.kinetic(p)

    def delta(e):
        s = nuts.leapfrog(_State(state.z, p, state.logp, state.grad), e)
        if not np.isfinite(s.logp):
            return -np.inf
        return H0 - (-s.logp + nuts.kinetic(s.p))

    d = delta(eps)
    direction = 1 if d > np.log(0.8) else -1
    for _ in range(100):
        eps_next = eps * (2.0**direction)
        d = delta(eps_next)
        if direction == 1 and not d > np.log(0.8):
            break
        if direction == -1 and d > np.log(0.8):
            eps = eps_next
            break
        eps = eps_next
    return eps


def _init_state(target, f, rng, init):
    for _ in range(100):
        if init is None:
            z = rng.uniform(-2, 2, target.dim)
        else:
            z = target.to_unconstrained(np.asarray(init, dtype=float))
        logp, grad = f(z)
        if np.isfinite(logp) and np.all(np.isfinite(grad)):
            return _State(z, np.zeros_like(z), logp, grad)
        if init is not None:
            raise ValidationError("initial point has non-finite log-density or gradient")
    raise SamplingError("could not find a finite initial point in 100 tries")


def _nuts_chain(target, warmup, draws, seed, max_tree_depth, target_accept, init):
    rng = np.random.default_rng(seed)
    f = target.unconstrained_logp_and_grad
    nuts = _Nuts(f, target.dim, rng, max_tree_depth)
    state = _init_state(target, f, rng, init)
    eps = _initial_step(nuts, state)
    da = _DualAveraging(eps, target_accept)
    windows = set(_warmup_windows(warmup))
    slow_start = 75 if warmup >= 150 else int(0.15 * warmup)
    window_draws = []
    warm_div = 0
    warm_accept = []
    for it in range(warmup):
        state, accept, _, div = nuts.transition(state, eps)
        warm_div += div
        warm_accept.append(accept)
        eps = da.update(accept)
        if it >= slow_start:
            window_draws.append(state.z.copy())
        if (it + 1) in windows:
            w = np.array(window_draws)
            n = w.shape[0]
            if n > 2:
                var = w.var(axis=0, ddof=1)
                nuts.inv_metric = (n / (n + 5.0)) * var + 1e-3 * (5.0 / (n + 5.0))
            window_draws = []
            eps = _initial_step(nuts, state)
            da.restart(eps)
    if warmup > 0:
        if warm_div == warmup:
            raise SamplingError("every warmup transition diverged",
                                {"warmup_divergences": warm_div, "step_size": eps})
        eps = da.final
    out = np.empty((draws, target.dim))
    acc = np.empty(draws)
    depths = np.empty(draws, dtype=int)
    lps = np.empty(draws)
    n_div = 0
    for i in range(draws):
        state, accept, depth, div = nuts.transition(state, eps)
        n_div += div
        out[i] = target.to_constrained(state.z)
        acc[i], depths[i], lps[i] = accept, depth, state.logp
    return PosteriorChain(out, target.names, warmup, seed, n_div, warm_div, eps,
                          nuts.inv_metric.copy(), acc, depths, lps, "nuts")


def chain_seeds(seed, chains):
    return [np.random.default_rng(s).integers(0, 2**63 - 1) for s in
            np.random.SeedSequence(seed).spawn(chains)]


def nuts_sample(target: TargetDensity, chains=4, warmup=1000, draws=1000, seed=0,
                max_tree_depth=10, target_accept=0.8, init=None):
    """Run independent NUTS chains; returns a list of :class:`PosteriorChain`.

    Warmup adapts the step size by dual averaging towards ``target_accept``
    and a diagonal inverse metric over doubling windows.  ``init`` (optional,
    constrained space) is shared by all chains; otherwise each chain starts
    uniformly in (-2, 2) on the unconstrained scale.
    """
    if not target.has_gradient:
        raise ValidationError("NUTS needs a target with gradients; use rwm_sample")
    if chains < 1 or draws < 1 or warmup < 0:
        raise ValidationError("need chains >= 1, draws >= 1, warmup >= 0")
    return [_nuts_chain(target, warmup, draws, s, max_tree_depth, target_accept, init)
            for s in chain_seeds(seed, chains)]


# ----------------------------------------------------------------------------
# random-walk Metropolis


def _rwm_chain(target, warmup, draws, seed, init, target_accept=0.234):
    rng = np.random.default_rng(seed)
    f = target.unconstrained_logp
    d = target.dim
    if init is None:
        for _ in range(100):
            z = rng.uniform(-2, 2, d)
            lp = f(z)
            if np.isfinite(lp):
                break
        else:
            raise SamplingError("could not find a finite initial point")
    else:
        z = target.to_unconstrained(np.asarray(init, dtype=float))
        lp = f(z)
    scale = 2.38 / np.sqrt(d)
    chol = 0.1 * np.eye(d)
    hist = []
    log_scale = np.log(scale)
    for it in range(warmup):
        prop = z + np.exp(log_scale) * chol @ rng.standard_normal(d)
        lpp = f(prop)
        a = min(1.0, float(np.exp(lpp - lp))) if np.isfinite(lpp) else 0.0
        if rng.random() < a:
            z, lp = prop, lpp
        log_scale += (a - target_accept) / (it + 1) ** 0.6
        hist.append(z.copy())
        if it + 1 >= 100 and (it + 1) % 100 == 0:
            cov = np.cov(np.array(hist[len(hist) // 2 :]).T).reshape(d, d) + 1e-8 * np.eye(d)
            try:
                chol = np.linalg.cholesky(cov)
            except np.linalg.LinAlgError:
                pass
    out = np.empty((draws, d))
    lps = np.empty(draws)
    accepted = 0
    step = np.exp(log_scale)
    for i in range(draws):
        prop = z + step * chol @ rng.standard_normal(d)
        lpp = f(prop)
        if np.isfinite(lpp) and np.log(rng.random()) < lpp - lp:
            z, lp = prop, lpp
            accepted += 1
        out[i] = target.to_constrained(z)
        lps[i] = lp
    return PosteriorChain(out, target.names, warmup, seed, step_size=float(step), logp=lps,
                          method="rwm", extra={"acceptance_rate": accepted / draws})


def rwm_sample(target: TargetDensity, chains=4, warmup=2000, draws=2000, seed=0, init=None):
    """Adaptive random-walk Metropolis for targets without gradients."""
    return [_rwm_chain(target, warmup, draws, s, init) for s in chain_seeds(seed, chains)]


def sample(target, chains=4, warmup=1000, draws=1000, seed=0, **kwargs):
    """NUTS when the target has gradients, random-walk Metropolis otherwise."""
    if target.has_gradient:
        return nuts_sample(target, chains, warmup, draws, seed, **kwargs)
    return rwm_sample(target, chains, max(warmup, 2000), max(draws, 2000), seed)


# ----------------------------------------------------------------------------
# diagnostics


def _as_array(chains):
    """(n_chains, n_draws, dim) array from chains or a raw array."""
    if isinstance(chains, np.ndarray):
        arr = chains
        if arr.ndim == 2:
            arr = arr[:, :, None]
        return np.asarray(arr, dtype=float)
    if chains and isinstance(chains[0], PosteriorChain):
        n = min(c.n_draws for c in chains)
        return np.stack([c.draws[:n] for c in chains])
    arr = np.asarray(chains, dtype=float)
    return arr[:, :, None] if arr.ndim == 2 else arr


def _split(arr):
    n = arr.shape[1] // 2
    return np.concatenate([arr[:, :n], arr[:, -n:]], axis=0)


def rhat(chains) -> np.ndarray:
    """Split-R-hat per dimension; NaN where all draws are identical."""
    arr = _as_array(chains)
    if arr.shape[0] < 2:
        raise ValidationError("R-hat needs at least 2 chains")
    if arr.shape[1] < 4:
        raise ValidationError("R-hat needs at least 4 draws per chain")
    s = _split(arr)
    n = s.shape[1]
    means = s.mean(axis=1)
    W = s.var(axis=1, ddof=1).mean(axis=0)
    B = n * means.var(axis=0, ddof=1)
    var_plus = (n - 1) / n * W + B / n
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.sqrt(var_plus / W)
    r[~(W > 0)] = np.nan
    return r


def _autocov(x):
    n = x.shape[-1]
    m = 1 << (2 * n - 1).bit_length()
    xc = x - x.mean(axis=-1, keepdims=True)
    f = np.fft.rfft(xc, n=m, axis=-1)
    return np.fft.irfft(f * np.conj(f), n=m, axis=-1)[..., :n] / n


def _ess_1d(x):
    """ESS of one dimension, ``x`` shaped (chains, draws) (Geyer initial positive sequence)."""
    m, n = x.shape
    acov = _autocov(x)
    chain_mean = x.mean(axis=1)
    mean_var = acov[:, 0].mean() * n / (n - 1)
    var_plus = mean_var * (n - 1) / n
    if m > 1:
        var_plus += chain_mean.var(ddof=1)
    if not var_plus > 0:
        return np.nan
    rho = 1.0 - (mean_var - acov.mean(axis=0)) / var_plus
    rho[0] = 1.0
    rho_t = np.zeros(n)
    t = 0
    even, odd = 1.0, rho[1]
    while t < n - 3 and even + odd > 0:
        rho_t[t], rho_t[t + 1] = even, odd
        t += 2
        even, odd = rho[t], rho[t + 1]
    max_t = t
    if even > 0:
        rho_t[max_t] = even
    # enforce a monotone sequence of pair sums
    for t in range(1, max_t - 2, 2):
        if rho_t[t + 1] + rho_t[t + 2] > rho_t[t - 1] + rho_t[t]:
            rho_t[t + 1] = rho_t[t + 2] = 0.5 * (rho_t[t - 1] + rho_t[t])
    tau = -1.0 + 2.0 * rho_t[:max_t].sum() + rho_t[max_t]
    tau = max(tau, 1.0 / np.log10(m * n))
    return m * n / tau


def ess(chains, split=True) -> np.ndarray:
    """Effective sample size per dimension; NaN for constant draws."""
    arr = _as_array(chains)
    if arr.shape[1] < 4:
        raise ValidationError("ESS needs at least 4 draws per chain")
    s = _split(arr) if split else arr
    return np.array([_ess_1d(s[:, :, j]) for j in range(s.shape[2])])


def mcse_mean(chains) -> np.ndarray:
    arr = _as_array(chains)
    flat = arr.reshape(-1, arr.shape[2])
    return flat.std(axis=0, ddof=1) / np.sqrt(ess(arr))


def pooled(chains) -> np.ndarray:
    """All draws of all chains stacked, shape (total_draws, dim)."""
    arr = _as_array(chains)
    return arr.reshape(-1, arr.shape[2])


def diagnostics(chains) -> dict:
    arr = _as_array(chains)
    names = chains[0].names if chains and isinstance(chains[0], PosteriorChain) else None
    r = rhat(arr) if arr.shape[0] >= 2 else np.full(arr.shape[2], np.nan)
    e = ess(arr)
    out = {
        "names": list(names) if names else [f"x{i}" for i in range(arr.shape[2])],
        "rhat": [None if not np.isfinite(v) else float(v) for v in r],
        "ess": [None if not np.isfinite(v) else float(v) for v in e],
        "degenerate": [bool(not np.isfinite(v)) for v in r],
        "n_chains": int(arr.shape[0]),
        "n_draws": int(arr.shape[1]),
    }
    if chains and isinstance(chains[0], PosteriorChain):
        out["divergences"] = [int(c.divergences) for c in chains]
        out["step_size"] = [float(c.step_size) for c in chains]
        out["method"] = chains[0].method
    return out


def write_chains(chains, path) -> None:
    """One CSV row per draw with ``chain``, ``draw`` and named parameter columns."""
    names = chains[0].names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["chain", "draw", *names])
        for c, ch in enumerate(chains):
            for i, row in enumerate(ch.draws):
                w.writerow([c, i, *(repr(float(v)) for v in row)])


def read_chains(path):
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    names = tuple(rows[0][2:])
    data = np.array([[float(v) for v in r] for r in rows[1:]])
    chains = []
    for c in np.unique(data[:, 0]).astype(int):
        sel = data[data[:, 0] == c]
        chains.append(PosteriorChain(sel[:, 2:], names, 0, None))
    return chains


def write_diagnostics(chains, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(diagnostics(chains), fh, indent=2, sort_keys=True)
