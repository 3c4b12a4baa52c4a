"""Shared data model: parameter vectors, time-series grids, transient cases.

Output grids are flattened location-major: all time steps of the first
location, then all time steps of the second, and so on.  Every covariance
matrix in the package is indexed in this order.
"""

from __future__ import annotations

import csv
import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class ValidationError(ValueError):
    """Input data violates a structural rule."""


class NumericalError(ArithmeticError):
    """A numerical routine failed (factorization, divergence, ...)."""


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class ParameterVector:
    """Physical-model-parameter multipliers with optional bounds."""

    values: np.ndarray
    names: tuple
    bounds: Optional[np.ndarray] = None

    def __init__(self, values, names=None, bounds=None):
        values = _frozen(np.atleast_1d(values))
        if values.ndim != 1 or values.size < 1:
            raise ValidationError("values must be a non-empty 1-D array")
        if not np.all(np.isfinite(values)):
            raise ValidationError("values must be finite")
        if names is None:
            names = tuple(f"theta{i + 1}" for i in range(values.size))
        names = tuple(str(n) for n in names)
        if len(names) != values.size:
            raise ValidationError("names and values differ in length")
        if bounds is not None:
            bounds = _frozen(bounds)
            if bounds.shape != (values.size, 2):
                raise ValidationError("bounds must have shape (d, 2)")
            if np.any(values < bounds[:, 0]) or np.any(values > bounds[:, 1]):
                raise ValidationError("values outside declared bounds")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "bounds", bounds)

    def __len__(self):
        return self.values.size


@dataclass(frozen=True)
class TimeSeriesGrid:
    """Values observed at ``L`` locations on a shared time axis of length ``T``.

    Construction does not validate; call :func:`validate_grid` (or build the
    grid through :meth:`checked`) when the data comes from outside.
    """

    times: np.ndarray
    locations: tuple
    values: np.ndarray

    def __init__(self, times, locations, values):
        object.__setattr__(self, "times", _frozen(times))
        object.__setattr__(self, "locations", tuple(str(x) for x in locations))
        object.__setattr__(self, "values", _frozen(np.atleast_2d(values)))

    @classmethod
    def checked(cls, times, locations, values):
        grid = cls(times, locations, values)
        problems = validate_grid(grid)
        if problems:
            raise ValidationError("; ".join(problems))
        return grid

    @property
    def shape(self):
        return self.values.shape

    def __eq__(self, other):
        if not isinstance(other, TimeSeriesGrid):
            return NotImplemented
        return (
            self.locations == other.locations
            and np.array_equal(self.times, other.times)
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None


@dataclass(frozen=True)
class TransientCase:
    """One transient: boundary conditions, measurements and their flattening."""

    id: str
    boundary_conditions: Optional[TimeSeriesGrid]
    measurements: TimeSeriesGrid
    flattened: np.ndarray = None
    covariance: object = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.flattened is None:
            object.__setattr__(self, "flattened", _frozen(flatten(self.measurements)))
        else:
            object.__setattr__(self, "flattened", _frozen(self.flattened))

    @property
    def k(self):
        return self.flattened.size

    def with_covariance(self, covariance):
        return TransientCase(
            self.id, self.boundary_conditions, self.measurements,
            self.flattened, covariance, dict(self.metadata),
        )


@dataclass(frozen=True)
class TrainingSet:
    """Design/response pairs for one case: ``inputs`` (N, d), ``outputs`` (N, k)."""

    inputs: np.ndarray
    outputs: np.ndarray
    case_id: str = ""

    def __post_init__(self):
        X = _frozen(np.atleast_2d(self.inputs))
        Y = _frozen(np.atleast_2d(self.outputs))
        if X.shape[0] != Y.shape[0]:
            raise ValidationError("inputs and outputs differ in row count")
        if X.shape[0] < X.shape[1] + 1:
            raise ValidationError(f"need at least d+1={X.shape[1] + 1} rows, got {X.shape[0]}")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(Y))):
            raise ValidationError("training rows must be finite")
        object.__setattr__(self, "inputs", X)
        object.__setattr__(self, "outputs", Y)

    def __len__(self):
        return self.inputs.shape[0]


def flatten(grid: TimeSeriesGrid) -> np.ndarray:
    """Concatenate ``grid.values`` row by row (location-major, then time)."""
    values = np.asarray(grid.values, dtype=float)
    if not np.all(np.isfinite(values)):
        raise ValidationError("grid contains non-finite values")
    return values.reshape(-1).copy()


def unflatten(vector, times, locations) -> TimeSeriesGrid:
    vector = np.asarray(vector, dtype=float)
    L, T = len(locations), len(times)
    if vector.size != L * T:
        raise ValidationError(f"vector of length {vector.size} cannot fill {L}x{T} grid")
    return TimeSeriesGrid(times, locations, vector.reshape(L, T))


def validate_grid(grid: TimeSeriesGrid, prefix: str = "") -> list:
    problems = []
    times = np.asarray(grid.times, dtype=float)
    values = np.asarray(grid.values, dtype=float)
    if times.ndim != 1 or times.size < 2:
        problems.append(f"{prefix}times: need at least 2 time steps")
    elif not np.all(np.isfinite(times)):
        problems.append(f"{prefix}times: non-finite entries")
    elif np.any(np.diff(times) <= 0):
        problems.append(f"{prefix}times: times not strictly increasing")
    if values.ndim != 2:
        problems.append(f"{prefix}values: must be 2-D (locations x times)")
        return problems
    if values.shape[0] != len(grid.locations):
        problems.append(f"{prefix}values: row count {values.shape[0]} != {len(grid.locations)} locations")
    if times.ndim == 1 and values.shape[1] != times.size:
        problems.append(f"{prefix}values: column count {values.shape[1]} != {times.size} times")
    if len(set(grid.locations)) != len(grid.locations):
        problems.append(f"{prefix}locations: duplicate names")
    if not np.all(np.isfinite(values)):
        problems.append(f"{prefix}values: non-finite entries")
    return problems


def validate_case(case: TransientCase) -> list:
    """Return a list of human-readable rule violations (empty when valid)."""
    problems = []
    if not isinstance(case.id, str) or not case.id:
        problems.append("id: must be a non-empty string")
    problems += validate_grid(case.measurements, "measurements.")
    if case.boundary_conditions is not None:
        problems += validate_grid(case.boundary_conditions, "boundary_conditions.")
        if not np.array_equal(case.boundary_conditions.times, case.measurements.times):
            problems.append("boundary_conditions.times: time grid differs from measurements")
    flat = np.asarray(case.flattened, dtype=float)
    values = np.asarray(case.measurements.values, dtype=float)
    if flat.ndim != 1 or flat.size != values.size:
        problems.append("flattened: flatten mismatch (length != L*T)")
    elif not np.array_equal(flat, values.reshape(-1), equal_nan=True):
        problems.append("flattened: flatten mismatch (not row-major concatenation)")
    cov = case.covariance
    if cov is not None:
        matrix = np.asarray(getattr(cov, "matrix", cov), dtype=float)
        if matrix.shape != (flat.size, flat.size):
            problems.append("covariance: shape does not match flattened length")
        elif not np.allclose(matrix, matrix.T, atol=1e-12):
            problems.append("covariance: not symmetric")
    if np.all(np.isfinite(values)) and (values.min() < 0 or values.max() > 1):
        warnings.warn(f"case {case.id!r}: measurements outside [0, 1]", stacklevel=2)
    return problems


def read_grid_csv(path) -> TimeSeriesGrid:
    """Read a ``time,<loc1>,<loc2>,...`` CSV into a grid."""
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or len(rows[0]) < 2 or rows[0][0].strip().lower() != "time":
        raise ValidationError(f"{path}: header must be 'time,<loc1>,...'")
    locations = [c.strip() for c in rows[0][1:]]
    try:
        data = np.array([[float(c) for c in r] for r in rows[1:] if r], dtype=float)
    except ValueError as exc:
        raise ValidationError(f"{path}: {exc}") from None
    if data.ndim != 2 or data.shape[1] != len(locations) + 1:
        raise ValidationError(f"{path}: ragged rows")
    return TimeSeriesGrid.checked(data[:, 0], locations, data[:, 1:].T)


def write_grid_csv(grid: TimeSeriesGrid, path) -> None:
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["time", *grid.locations])
        for j, t in enumerate(grid.times):
            w.writerow([repr(float(t)), *(repr(float(v)) for v in grid.values[:, j])])


def write_case(case: TransientCase, directory) -> list:
    """Write ``<id>.csv`` (measurements), ``<id>.bc.csv`` and ``<id>.json`` (metadata)."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = [directory / f"{case.id}.csv", directory / f"{case.id}.json"]
    write_grid_csv(case.measurements, paths[0])
    if case.boundary_conditions is not None:
        paths.append(directory / f"{case.id}.bc.csv")
        write_grid_csv(case.boundary_conditions, paths[-1])
    with open(paths[1], "w", encoding="utf-8") as fh:
        json.dump({"id": case.id, **case.metadata}, fh, indent=2, sort_keys=True)
    return paths


def read_case(directory, case_id: str) -> TransientCase:
    directory = Path(directory)
    path = directory / f"{case_id}.csv"
    if not path.exists():
        raise ValidationError(f"case file {path} not found")
    meas = read_grid_csv(path)
    bc_path = directory / f"{case_id}.bc.csv"
    bc = read_grid_csv(bc_path) if bc_path.exists() else None
    meta_path = directory / f"{case_id}.json"
    meta = {}
    if meta_path.exists():
        with open(meta_path, encoding="utf-8") as fh:
            meta = json.load(fh)
        meta.pop("id", None)
    case = TransientCase(case_id, bc, meas, metadata=meta)
    problems = validate_case(case)
    if problems:
        raise ValidationError(f"case {case_id}: " + "; ".join(problems))
    return case


def as_2d(X, n_features: Optional[int] = None, name: str = "X") -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[None, :]
    if X.ndim != 2:
        raise ValidationError(f"{name} must be 1-D or 2-D")
    if n_features is not None and X.shape[1] != n_features:
        raise ValidationError(f"{name} has {X.shape[1]} features, expected {n_features}")
    return X


def parse_bounds(text: str) -> np.ndarray:
    """Parse ``"0:5,0:5"`` into an array of shape (d, 2)."""
    try:
        pairs = [tuple(float(v) for v in part.split(":")) for part in text.split(",")]
    except ValueError:
        raise ValidationError(f"cannot parse bounds {text!r}") from None
    if any(len(p) != 2 for p in pairs):
        raise ValidationError(f"cannot parse bounds {text!r}")
    return np.array(pairs, dtype=float)


def check_bounds(bounds: Sequence) -> np.ndarray:
    b = np.atleast_2d(np.asarray(bounds, dtype=float))
    if b.ndim != 2 or b.shape[1] != 2:
        raise ValidationError("bounds must be a sequence of (low, high) pairs")
    if not np.all(np.isfinite(b)) or np.any(b[:, 0] >= b[:, 1]):
        raise ValidationError("each bound needs finite low < high")
    return b
