"""Simplex geometry and the update rules shared by every algorithm."""

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from fedminmax.model import ParamVector

SIMPLEX_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class SimplexWeights:
    """A point on the probability simplex, optionally with an entry floor."""

    values: np.ndarray
    floor: float = 0.0

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or values.size == 0:
            raise ValueError("simplex weights must be a nonempty vector")
        if not np.all(np.isfinite(values)):
            raise ValueError("simplex weights must be finite")
        if np.any(values < 0):
            raise ValueError(f"simplex weights must be nonnegative, got {values.tolist()}")
        if abs(values.sum() - 1.0) > SIMPLEX_TOL:
            raise ValueError(f"simplex weights must sum to 1, got {values.sum():.12g}")
        if self.floor and np.any(values < self.floor - 1e-12):
            raise ValueError(f"simplex weights fall below the floor {self.floor}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_counts(cls, counts) -> "SimplexWeights":
        counts = np.asarray(counts)
        return cls(counts / counts.sum())

    @classmethod
    def uniform(cls, dimension: int) -> "SimplexWeights":
        return cls(np.full(dimension, 1.0 / dimension))

    @property
    def dimension(self) -> int:
        return self.values.size

    def __len__(self) -> int:
        return self.values.size


@dataclass(frozen=True, eq=False)
class ImportanceWeights:
    """Per-group multipliers ``w_a = mu_a / rho_a``."""

    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.ndim != 1 or not np.all(np.isfinite(values)) or np.any(values < 0):
            raise ValueError("importance weights must be a finite nonnegative vector")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    def __len__(self) -> int:
        return self.values.size


def project_simplex(v, floor: float = 0.0) -> SimplexWeights:
    """Euclidean projection onto ``{x : sum(x) = 1, x_i >= floor}``.

    The floored simplex is mapped onto the unit one through
    ``x = floor + (1 - d * floor) * y`` and solved by sort-and-threshold.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.ndim != 1 or v.size == 0:
        raise ValueError("can only project a nonempty vector")
    if not np.all(np.isfinite(v)):
        raise ValueError(f"cannot project a non-finite vector {v.tolist()}")
    d = v.size
    if floor < 0 or floor * d > 1.0 + 1e-12:
        raise ValueError(f"infeasible floor {floor} for dimension {d}")
    if d == 1:
        return SimplexWeights(np.ones(1), floor)

    mass = 1.0 - d * floor
    if mass <= 0:
        return SimplexWeights(np.full(d, floor), floor)

    u = (v - floor) / mass
    # stable: ties keep index order
    s = u[np.argsort(-u, kind="stable")]
    cssv = np.cumsum(s) - 1.0
    ind = np.arange(1, d + 1)
    rho = ind[s - cssv / ind > 0][-1]
    tau = cssv[rho - 1] / rho
    y = np.maximum(u - tau, 0.0)
    return SimplexWeights(floor + mass * y, floor)


def pga_step(
    weights: SimplexWeights,
    grad,
    lr: float,
    floor: float = 0.0,
) -> SimplexWeights:
    """One projected gradient ascent step for the adversary.

    For the objective ``<mu, r>`` the gradient is the risk vector itself.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != weights.values.shape:
        raise ValueError(
            f"gradient has {grad.size} entries, adversary has {weights.dimension}"
        )
    if lr < 0:
        raise ValueError(f"adversary learning rate must be nonnegative, got {lr}")
    return project_simplex(weights.values + lr * grad, floor)


def aggregate_params(updates: Sequence[ParamVector], weights: Sequence[float]) -> ParamVector:
    """Convex combination of parameter vectors, summed in the given order."""
    if not updates:
        raise ValueError("nothing to aggregate")
    coef = np.asarray(weights, dtype=np.float64)
    if coef.shape != (len(updates),):
        raise ValueError(f"{len(updates)} updates but {coef.size} weights")
    if not np.all(np.isfinite(coef)) or np.any(coef < 0):
        raise ValueError("aggregation weights must be finite and nonnegative")
    if abs(coef.sum() - 1.0) > SIMPLEX_TOL:
        raise ValueError(f"aggregation weights must sum to 1, got {coef.sum():.12g}")
    spec = updates[0].spec
    for update in updates:
        if update.spec != spec:
            raise ValueError("cannot aggregate parameter vectors of different shapes")

    total = np.zeros(spec.num_params)
    for c, update in zip(coef, updates):
        total += c * update.values
    return ParamVector(spec, total)


def importance_weights(mu: SimplexWeights, rho: SimplexWeights) -> ImportanceWeights:
    if mu.dimension != rho.dimension:
        raise ValueError(f"adversary has {mu.dimension} entries, prior has {rho.dimension}")
    missing = np.flatnonzero(rho.values <= 0)
    if missing.size:
        raise ValueError(
            f"group prior is zero for {missing.tolist()}; every group needs samples in the federation"
        )
    return ImportanceWeights(mu.values / rho.values)
