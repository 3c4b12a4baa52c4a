"""Latin hypercube designs."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .core import ValidationError, check_bounds


@dataclass(frozen=True)
class DesignMatrix:
    points: np.ndarray
    bounds: np.ndarray
    seed: int

    @property
    def n(self):
        return self.points.shape[0]

    def to_csv(self, path, names=None):
        d = self.points.shape[1]
        names = names or [f"theta{i + 1}" for i in range(d)]
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(names)
            for row in self.points:
                w.writerow([repr(float(v)) for v in row])


def lhs_sample(n: int, bounds, seed: int = 0) -> DesignMatrix:
    """Draw an ``n``-point Latin hypercube inside ``bounds``.

    Each column is split into ``n`` equal bins and holds exactly one point per
    bin, placed uniformly at random inside its bin.
    """
    if int(n) != n or n < 1:
        raise ValidationError("n must be a positive integer")
    n = int(n)
    b = check_bounds(bounds)
    d = b.shape[0]
    rng = np.random.default_rng(seed)
    # one independent permutation of bin indices per column
    bins = np.argsort(rng.random((n, d)), axis=0)
    u = (bins + rng.random((n, d))) / n
    low, high = b[:, 0], b[:, 1]
    points = low + u * (high - low)
    # guard against round-up onto the open upper edge
    points = np.minimum(points, np.nextafter(high, low))
    points.setflags(write=False)
    return DesignMatrix(points, b, seed)


def uniform_sample(n: int, bounds, seed: int = 0) -> np.ndarray:
    b = check_bounds(bounds)
    rng = np.random.default_rng(seed)
    return b[:, 0] + rng.random((int(n), b.shape[0])) * (b[:, 1] - b[:, 0])
