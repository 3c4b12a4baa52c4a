"""Observation covariance from boundary-condition ensembles; MVN log-density."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .core import NumericalError, ValidationError

log = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class Ensemble:
    members: np.ndarray
    case_id: str = ""

    def __post_init__(self):
        m = np.atleast_2d(np.asarray(self.members, dtype=float))
        if m.shape[0] < 2:
            raise ValidationError("an ensemble needs at least 2 members")
        if not np.all(np.isfinite(m)):
            raise ValidationError("ensemble members must be finite")
        m.setflags(write=False)
        object.__setattr__(self, "members", m)

    @property
    def size(self):
        return self.members.shape[0]


@dataclass(frozen=True)
class CovarianceModel:
    """``matrix`` is the ensemble estimate; ``total = matrix + diag(nugget)`` is factorized."""

    matrix: np.ndarray
    nugget: object = 0.0
    mode: str = "full"
    case_id: str = ""
    cholesky: np.ndarray = field(default=None, repr=False)
    clipped: bool = False

    @property
    def k(self):
        return self.matrix.shape[0]

    @property
    def total(self):
        return self.cholesky @ self.cholesky.T

    def logdet(self):
        return 2.0 * float(np.log(np.diag(self.cholesky)).sum())

    def solve(self, r):
        return cho_solve((self.cholesky, True), r, check_finite=False)

    def whiten(self, r):
        return solve_triangular(self.cholesky, r, lower=True, check_finite=False)

    def sidecar(self):
        nug = np.asarray(self.nugget, dtype=float)
        return {
            "case_id": self.case_id,
            "mode": self.mode,
            "nugget": float(nug) if nug.ndim == 0 else nug.tolist(),
            "clipped": bool(self.clipped),
            "k": int(self.k),
        }


def propagate_bc_uncertainty(simulator, case_spec, bc_distributions, M, theta_nominal,
                             seed=0, perturb=None) -> Ensemble:
    """Run the simulator ``M`` times at ``theta_nominal`` with perturbed boundary conditions.

    ``simulator(theta, spec, bc)`` must return the flattened series;
    ``perturb(spec, bc_distributions, rng)`` draws one set of boundary
    conditions (defaults to :func:`tdiuq.synthsim.perturb_bc`).  Members
    whose simulation raises are dropped with a warning.
    """
    if perturb is None:
        from .synthsim import perturb_bc as perturb
    children = np.random.SeedSequence(seed).spawn(int(M))
    members = []
    for i, child in enumerate(children):
        rng = np.random.default_rng(child)
        try:
            bc = perturb(case_spec, bc_distributions, rng)
            y = np.asarray(simulator(theta_nominal, case_spec, bc), dtype=float)
            if not np.all(np.isfinite(y)):
                raise NumericalError("non-finite output")
        except (NumericalError, ValidationError, FloatingPointError) as exc:
            log.warning("ensemble member %d dropped: %s", i, exc)
            continue
        members.append(y)
    if len(members) < 2:
        raise NumericalError(f"only {len(members)} ensemble members survived")
    return Ensemble(np.array(members), getattr(case_spec, "id", ""))


def estimate_cov(ensemble, n_blocks: int | None = None) -> np.ndarray:
    """Unbiased sample covariance of the members.

    With ``n_blocks`` set, the flattened vector is treated as ``n_blocks``
    equal consecutive segments (locations) and cross-segment covariances are
    zeroed.
    """
    members = ensemble.members if isinstance(ensemble, Ensemble) else np.atleast_2d(ensemble)
    if members.shape[0] < 2:
        raise ValidationError("need at least 2 members")
    centered = members - members.mean(axis=0)
    cov = centered.T @ centered / (members.shape[0] - 1)
    if n_blocks:
        k = cov.shape[0]
        if k % n_blocks:
            raise ValidationError(f"{k} outputs do not split into {n_blocks} blocks")
        labels = np.repeat(np.arange(n_blocks), k // n_blocks)
        cov = np.where(labels[:, None] == labels[None, :], cov, 0.0)
    return 0.5 * (cov + cov.T)


def default_nugget(ensemble_or_cov, fraction=0.01) -> np.ndarray:
    """Per-output independent variance ``(fraction * sample sd)^2``."""
    if isinstance(ensemble_or_cov, Ensemble):
        sd = ensemble_or_cov.members.std(axis=0, ddof=1)
    else:
        sd = np.sqrt(np.clip(np.diag(np.asarray(ensemble_or_cov)), 0, None))
    return (fraction * sd) ** 2


def regularize_cov(cov, nugget=0.0, mode="full", case_id="") -> CovarianceModel:
    """Add the independent-error nugget and factorize.

    ``mode="diagonal"`` drops all off-diagonal terms first.  If the
    Cholesky factorization fails, eigenvalues are clipped at
    ``1e-10 * trace / k`` and the matrix is factorized again.
    """
    cov = np.asarray(cov, dtype=float)
    if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
        raise ValidationError("covariance must be square")
    if not np.allclose(cov, cov.T, rtol=1e-10, atol=1e-14):
        raise ValidationError("covariance must be symmetric")
    if mode not in ("full", "diagonal"):
        raise ValidationError(f"unknown covariance mode {mode!r}")
    nug = np.asarray(nugget, dtype=float)
    if np.any(nug < 0) or nug.ndim > 1 or (nug.ndim == 1 and nug.size != cov.shape[0]):
        raise ValidationError("nugget must be a nonnegative scalar or per-output vector")
    base = np.diag(np.diag(cov)) if mode == "diagonal" else 0.5 * (cov + cov.T)
    total = base + np.diag(np.broadcast_to(nug, (cov.shape[0],)))
    clipped = False
    try:
        L = cholesky(total, lower=True, check_finite=False)
    except np.linalg.LinAlgError:
        w, V = np.linalg.eigh(total)
        floor = 1e-10 * max(float(np.trace(total)), 0.0) / total.shape[0]
        if floor <= 0:
            raise NumericalError("covariance has no positive variance to repair with") from None
        total = (V * np.maximum(w, floor)) @ V.T
        total = 0.5 * (total + total.T)
        try:
            L = cholesky(total, lower=True, check_finite=False)
        except np.linalg.LinAlgError:
            raise NumericalError("covariance still not positive definite after clipping") from None
        clipped = True
    return CovarianceModel(base, nug if nug.ndim else float(nug), mode, case_id, L, clipped)


def mvn_logpdf(x, mean, cov) -> float:
    """Multivariate normal log-density using the Cholesky factor of ``cov``.

    ``cov`` is a :class:`CovarianceModel` or a dense positive definite array.
    """
    if not isinstance(cov, CovarianceModel):
        cov = regularize_cov(cov)
    r = np.asarray(x, dtype=float) - np.asarray(mean, dtype=float)
    if r.shape != (cov.k,):
        raise ValidationError(f"dimension mismatch: {r.shape} vs covariance of size {cov.k}")
    z = cov.whiten(r)
    return float(-0.5 * cov.k * _LOG_2PI - 0.5 * cov.logdet() - 0.5 * z @ z)


def save_covariance(model: CovarianceModel, path) -> None:
    """Write the dense ensemble matrix as CSV plus a JSON sidecar ``<path>.json``."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        for row in model.matrix:
            w.writerow([repr(float(v)) for v in row])
    with open(path.with_suffix(".json"), "w", encoding="utf-8") as fh:
        json.dump(model.sidecar(), fh, indent=2, sort_keys=True)


def load_covariance(path) -> CovarianceModel:
    path = Path(path)
    matrix = np.loadtxt(path, delimiter=",", ndmin=2)
    with open(path.with_suffix(".json"), encoding="utf-8") as fh:
        meta = json.load(fh)
    nugget = np.asarray(meta["nugget"], dtype=float)
    return regularize_cov(matrix, nugget, meta["mode"], meta.get("case_id", ""))
