"""Cheap deterministic transient simulator with known ground truth.

Boundary conditions (pressure, flow, power, inlet temperature) are
normalized so that 1.0 is nominal.  They combine into a heating ratio
``u(t) = power/flow + c_T (T_in - 1) - c_p (p - 1)``.  At each of three
measurement locations with gain ``g``::

    z*(t)   = c + beta (theta[2] - 1) + kappa theta[3] (g - 1) + gamma theta[0] g (u(t) - 1)
    z(t_n)  = z(t_{n-1}) + a (z*(t_n) - z(t_{n-1})),   a = 1 - exp(-dt / tau)
    x(t)    = logistic(z(t)),                          tau = tau0 theta[1]

with ``z(t_0) = z*(t_0)`` and ``c`` a fixed per-location base level.
Parameter roles:

* ``theta[0]`` gain: amplitude of the transient excursion (no effect at steady state)
* ``theta[1]`` lag: response time constant (zero gives an instantaneous response)
* ``theta[2]`` offset: uniform shift of the void level
* ``theta[3]`` slope: steepness of the void/heating relation

The logistic keeps ``x`` in [0, 1].  Effect sizes are kept moderate so the
response family over (0, 5)^4 is nearly low-rank, as thermal-hydraulic
transients are.
An optional additive discrepancy (a time-localized bump or a tail step)
mimics simulator-reality mismatch that no parameter setting can remove;
the result is clipped to [0, 1].
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from typing import Optional

import numpy as np

from .core import TimeSeriesGrid, TransientCase, ValidationError

PARAM_NAMES = ("gain", "lag", "offset", "slope")
BC_CHANNELS = ("pressure", "flow", "power", "inlet_temperature")
LOCATIONS = ("lower", "middle", "upper")
NOMINAL = np.ones(4)

KAPPA = 0.5
GAMMA = 0.4
BETA = 0.25
TAU0 = 5.0
LOCATION_BASE = (-0.6, -0.1, 0.4)
C_TEMP = 2.0
C_PRES = 1.0

TRAIN_IDS = ("5T-FR", "5T-PI", "6T-FR", "6T-TI", "7T-FR")
TEST_IDS = ("5T-TI", "6T-PI", "7T-PI", "7T-TI")


@dataclass(frozen=True)
class Discrepancy:
    """Additive model-form error: ``bump`` (Gaussian in time) or ``tail`` (smooth step)."""

    form: str = "bump"
    magnitude: float = 0.05
    center: float = 150.0
    width: float = 15.0

    def __post_init__(self):
        if self.form not in ("bump", "tail"):
            raise ValidationError(f"unknown discrepancy form {self.form!r}")
        if not (np.isfinite(self.magnitude) and np.isfinite(self.center) and self.width > 0):
            raise ValidationError("discrepancy parameters must be finite, width positive")

    def __call__(self, times):
        z = (np.asarray(times) - self.center) / self.width
        if self.form == "bump":
            return self.magnitude * np.exp(-0.5 * z * z)
        return self.magnitude / (1.0 + np.exp(-4.0 * z))


@dataclass(frozen=True)
class CaseSpec:
    """Profile of one synthetic transient.

    ``transient`` picks the ramped channel: ``FR`` (flow reduction), ``PI``
    (power increase) or ``TI`` (inlet temperature increase).  ``magnitude``
    is the relative change reached at ``ramp_end``.
    """

    id: str
    transient: str = "FR"
    T: int = 40
    dt: float = 5.0
    ramp_start: float = 50.0
    ramp_end: float = 80.0
    magnitude: float = 0.3
    location_gains: tuple = (0.7, 1.0, 1.3)
    discrepancy: Optional[Discrepancy] = None

    def __post_init__(self):
        if self.transient not in ("FR", "PI", "TI"):
            raise ValidationError(f"unknown transient type {self.transient!r}")
        if self.T < 10:
            raise ValidationError("T must be at least 10")
        vals = (self.dt, self.ramp_start, self.ramp_end, self.magnitude, *self.location_gains)
        if not all(np.isfinite(v) for v in vals):
            raise ValidationError("profile parameters must be finite")
        if self.dt <= 0 or self.ramp_end <= self.ramp_start:
            raise ValidationError("need dt > 0 and ramp_end > ramp_start")
        if len(self.location_gains) != len(LOCATIONS):
            raise ValidationError(f"need {len(LOCATIONS)} location gains")
        if self.transient == "FR" and not 0 <= self.magnitude < 1:
            raise ValidationError("flow reduction magnitude must lie in [0, 1)")

    @property
    def times(self):
        return np.arange(self.T) * self.dt

    @property
    def k(self):
        return self.T * len(LOCATIONS)

    def transition_window(self, lag_allowance=30.0):
        """Time mask covering the ramp plus a settling allowance."""
        t = self.times
        return (t >= self.ramp_start) & (t <= self.ramp_end + lag_allowance)

    def to_dict(self):
        d = asdict(self)
        d["location_gains"] = list(self.location_gains)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        if d.get("discrepancy"):
            d["discrepancy"] = Discrepancy(**d["discrepancy"])
        d["location_gains"] = tuple(d["location_gains"])
        return cls(**d)


def _smoothstep(t, t0, t1):
    s = np.clip((t - t0) / (t1 - t0), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def boundary_conditions(spec: CaseSpec) -> np.ndarray:
    """Nominal boundary-condition series, shape (4, T), rows in ``BC_CHANNELS`` order."""
    t = spec.times
    ramp = _smoothstep(t, spec.ramp_start, spec.ramp_end)
    bc = np.ones((len(BC_CHANNELS), spec.T))
    if spec.transient == "FR":
        bc[1] -= spec.magnitude * ramp
    elif spec.transient == "PI":
        bc[2] += spec.magnitude * ramp
    else:
        bc[3] += spec.magnitude * ramp
    return bc


def _heating(bc):
    p, w, q, tin = bc
    return q / w + C_TEMP * (tin - 1.0) - C_PRES * (p - 1.0)


def simulate_values(theta, spec: CaseSpec, bc=None, discrepancy=True) -> np.ndarray:
    """Response array of shape (3, T); see the module docstring for the model."""
    theta = np.asarray(theta, dtype=float)
    if theta.shape != (4,) or not np.all(np.isfinite(theta)):
        raise ValidationError("theta must be 4 finite values")
    bc = boundary_conditions(spec) if bc is None else np.asarray(bc, dtype=float)
    if bc.shape != (len(BC_CHANNELS), spec.T):
        raise ValidationError(f"boundary conditions must have shape (4, {spec.T})")
    u = _heating(bc)
    g = np.asarray(spec.location_gains)[:, None]
    base = np.asarray(LOCATION_BASE)[:, None]
    target = (base + BETA * (theta[2] - 1.0) + KAPPA * theta[3] * (g - 1.0)
              + GAMMA * theta[0] * g * (u - 1.0))
    tau = TAU0 * theta[1]
    a = 1.0 - np.exp(-spec.dt / tau) if tau > 0 else 1.0
    z = np.empty_like(target)
    z[:, 0] = target[:, 0]
    for n in range(1, spec.T):
        z[:, n] = z[:, n - 1] + a * (target[:, n] - z[:, n - 1])
    x = 0.5 * (1.0 + np.tanh(0.5 * z))
    if discrepancy and spec.discrepancy is not None:
        x = np.clip(x + spec.discrepancy(spec.times)[None, :], 0.0, 1.0)
    return x


def simulate(theta, spec: CaseSpec, bc=None, discrepancy=True) -> TimeSeriesGrid:
    return TimeSeriesGrid(spec.times, LOCATIONS, simulate_values(theta, spec, bc, discrepancy))


def simulate_flat(theta, spec: CaseSpec, bc=None, discrepancy=True) -> np.ndarray:
    return simulate_values(theta, spec, bc, discrepancy).reshape(-1)


def run_design(spec: CaseSpec, X, discrepancy=False) -> np.ndarray:
    """Simulate every row of ``X``; returns (N, k)."""
    return np.array([simulate_flat(x, spec, discrepancy=discrepancy) for x in np.atleast_2d(X)])


def perturb_bc(spec: CaseSpec, bc_distributions: dict, rng) -> np.ndarray:
    """Multiplicative perturbation of the nominal boundary conditions.

    ``bc_distributions`` maps channel name to a law with optional keys
    ``sd`` and ``rho`` (stationary AR(1) noise with that marginal relative
    sd and lag-1 correlation) and ``drift_sd`` (random-walk drift with that
    relative sd per time step, zero at the first step).  Missing channels
    are left unperturbed.
    """
    bc = boundary_conditions(spec)
    for c, name in enumerate(BC_CHANNELS):
        law = bc_distributions.get(name)
        if not law:
            continue
        sd, rho = float(law.get("sd", 0.0)), float(law.get("rho", 0.0))
        drift = float(law.get("drift_sd", 0.0))
        if sd < 0 or drift < 0 or not -1 < rho < 1:
            raise ValidationError(f"{name}: need sd, drift_sd >= 0 and -1 < rho < 1")
        factor = np.ones(spec.T)
        if drift:
            steps = drift * rng.standard_normal(spec.T)
            steps[0] = 0.0
            factor += np.cumsum(steps)
        if sd:
            factor += ar1_series(spec.T, rho, sd, rng)
        bc[c] = bc[c] * factor
    return bc


def ar1_series(n, rho, sigma, rng, size=None):
    """Stationary AR(1) paths with marginal sd ``sigma``; shape ``size + (n,)``."""
    size = () if size is None else tuple(np.atleast_1d(size))
    z = rng.standard_normal(size + (n,))
    e = np.empty_like(z)
    e[..., 0] = sigma * z[..., 0]
    innov = sigma * np.sqrt(1.0 - rho * rho)
    for t in range(1, n):
        e[..., t] = rho * e[..., t - 1] + innov * z[..., t]
    return e


@dataclass
class BenchmarkSuite:
    specs: list
    theta_true: dict
    train_ids: tuple = TRAIN_IDS
    test_ids: tuple = TEST_IDS
    mu: np.ndarray = field(default_factory=lambda: NOMINAL.copy())
    sigma: np.ndarray = field(default_factory=lambda: np.zeros(4))
    seed: int = 0

    def spec(self, case_id):
        for s in self.specs:
            if s.id == case_id:
                return s
        raise KeyError(case_id)

    def to_dict(self):
        return {
            "seed": self.seed,
            "mu": list(map(float, self.mu)),
            "sigma": list(map(float, self.sigma)),
            "train_ids": list(self.train_ids),
            "test_ids": list(self.test_ids),
            "theta_true": {k: list(map(float, v)) for k, v in self.theta_true.items()},
            "specs": [s.to_dict() for s in self.specs],
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            specs=[CaseSpec.from_dict(s) for s in d["specs"]],
            theta_true={k: np.asarray(v) for k, v in d["theta_true"].items()},
            train_ids=tuple(d["train_ids"]),
            test_ids=tuple(d["test_ids"]),
            mu=np.asarray(d["mu"]),
            sigma=np.asarray(d["sigma"]),
            seed=d["seed"],
        )


_ASSEMBLIES = {
    "5T": dict(location_gains=(0.70, 1.00, 1.30), ramp_start=50.0, ramp_end=80.0),
    "6T": dict(location_gains=(0.75, 1.05, 1.35), ramp_start=60.0, ramp_end=95.0),
    "7T": dict(location_gains=(0.65, 0.95, 1.25), ramp_start=45.0, ramp_end=70.0),
}
_TRANSIENTS = {"FR": 0.30, "PI": 0.35, "TI": 0.15}

DEFAULT_MU = np.array([1.2, 0.8, 1.5, 0.9])
DEFAULT_SIGMA = np.array([0.15, 0.15, 0.2, 0.1])


def make_benchmark_suite(seed: int = 0, heterogeneous: bool = False, mu=None, sigma=None,
                         discrepancy: Optional[dict] = None) -> BenchmarkSuite:
    """Nine cases: three assembly analogs times three transient types.

    With ``heterogeneous=True`` each case gets its own truth drawn from
    ``N(mu, sigma)`` (clipped to stay positive); otherwise all cases share
    ``mu``.  ``discrepancy`` maps case ids to :class:`Discrepancy` objects.
    """
    mu = DEFAULT_MU.copy() if mu is None else np.asarray(mu, dtype=float)
    sigma = DEFAULT_SIGMA.copy() if sigma is None else np.asarray(sigma, dtype=float)
    discrepancy = discrepancy or {}
    rng = np.random.default_rng(seed)
    specs, truth = [], {}
    for asm, akw in _ASSEMBLIES.items():
        for tr, mag in _TRANSIENTS.items():
            cid = f"{asm}-{tr}"
            specs.append(CaseSpec(cid, transient=tr, magnitude=mag,
                                  discrepancy=discrepancy.get(cid), **akw))
    for s in specs:
        if heterogeneous:
            truth[s.id] = np.maximum(mu + sigma * rng.standard_normal(4), 0.05)
        else:
            truth[s.id] = mu.copy()
    return BenchmarkSuite(specs, truth, mu=mu, sigma=sigma if heterogeneous else np.zeros(4),
                          seed=seed)


def synthesize_observations(spec: CaseSpec, theta, noise: Optional[dict] = None,
                            seed: int = 0) -> TransientCase:
    """Simulated measurements plus additive noise.

    ``noise`` is ``{"kind": "iid", "sigma": s}`` or
    ``{"kind": "ar1", "rho": r, "sigma": s}``; the AR(1) law runs along time
    independently at each location.
    """
    noise = noise or {"kind": "iid", "sigma": 0.0}
    kind = noise.get("kind", "iid")
    sigma = float(noise.get("sigma", 0.0))
    if sigma < 0 or kind not in ("iid", "ar1"):
        raise ValidationError(f"invalid noise law {noise!r}")
    rng = np.random.default_rng(seed)
    clean = simulate_values(theta, spec)
    L = clean.shape[0]
    if kind == "iid":
        err = sigma * rng.standard_normal(clean.shape)
    else:
        rho = float(noise.get("rho", 0.0))
        if not -1 < rho < 1:
            raise ValidationError("AR(1) rho must lie in (-1, 1)")
        err = ar1_series(spec.T, rho, sigma, rng, size=L)
    meas = TimeSeriesGrid(spec.times, LOCATIONS, clean + err)
    bc = TimeSeriesGrid(spec.times, BC_CHANNELS, boundary_conditions(spec))
    meta = {"spec": spec.to_dict(), "theta_true": list(map(float, theta)), "noise": dict(noise),
            "seed": seed}
    return TransientCase(spec.id, bc, meas, metadata=meta)


def save_spec(spec: CaseSpec, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(spec.to_dict(), fh, indent=2, sort_keys=True)


def load_spec(path) -> CaseSpec:
    with open(path, encoding="utf-8") as fh:
        return CaseSpec.from_dict(json.load(fh))


def with_discrepancy(spec: CaseSpec, discrepancy: Optional[Discrepancy]) -> CaseSpec:
    return replace(spec, discrepancy=discrepancy)
