"""Multi-task inverse problem containers and preprocessing.

The data model is a set of S regression tasks sharing a common feature
space: per subject a design matrix ``L`` of shape (n, p) mapping source
amplitudes to sensor measurements, and a measurement vector ``y`` of
length n. Column j refers to the same source location in every task, so
coefficient vectors can be compared through a shared ground metric over
the p locations.
"""

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "GroundMetric",
    "SignedVector",
    "NoiseModel",
    "ProblemInstance",
    "whiten",
    "depth_weight",
    "lambda_max",
    "sigma_floor",
]


def _readonly(a):
    a = np.ascontiguousarray(a, dtype=np.float64)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class GroundMetric:
    """Symmetric pairwise cost matrix between source locations, in mm.

    Entries must be nonnegative with a zero diagonal. When built from
    graph geodesics the triangle inequality holds as well, but that is
    not checked here (it is O(p^3)).
    """

    costs: np.ndarray

    def __post_init__(self):
        costs = _readonly(self.costs)
        if costs.ndim != 2 or costs.shape[0] != costs.shape[1]:
            raise ValueError(f"metric must be square, got shape {costs.shape}")
        if not np.allclose(costs, costs.T, rtol=0.0, atol=1e-12):
            raise ValueError("metric must be symmetric")
        if np.any(np.diag(costs) != 0.0):
            raise ValueError("metric must have a zero diagonal")
        if costs.min() < 0.0:
            raise ValueError("metric entries must be nonnegative")
        object.__setattr__(self, "costs", costs)

    @property
    def n_points(self):
        return self.costs.shape[0]


@dataclass(frozen=True)
class SignedVector:
    """A real vector stored as nonnegative positive and negative parts.

    The represented value is ``pos - neg``. Solvers optimize the two
    parts separately; at convergence they have complementary supports.
    """

    pos: np.ndarray
    neg: np.ndarray

    def __post_init__(self):
        pos = _readonly(self.pos)
        neg = _readonly(self.neg)
        if pos.shape != neg.shape or pos.ndim != 1:
            raise ValueError("pos and neg must be 1-d arrays of equal length")
        if pos.min(initial=0.0) < 0.0 or neg.min(initial=0.0) < 0.0:
            raise ValueError("pos and neg must be nonnegative")
        object.__setattr__(self, "pos", pos)
        object.__setattr__(self, "neg", neg)

    @classmethod
    def from_signed(cls, x):
        x = np.asarray(x, dtype=np.float64)
        return cls(np.maximum(x, 0.0), np.maximum(-x, 0.0))

    @property
    def values(self):
        return self.pos - self.neg

    def __len__(self):
        return self.pos.shape[0]


@dataclass(frozen=True)
class NoiseModel:
    """Sensor noise covariance. ``None`` means identity."""

    covariance: np.ndarray | None = None

    def __post_init__(self):
        if self.covariance is not None:
            cov = _readonly(self.covariance)
            if cov.ndim != 2 or cov.shape[0] != cov.shape[1]:
                raise ValueError("covariance must be square")
            if not np.allclose(cov, cov.T, rtol=0.0, atol=1e-10):
                raise ValueError("covariance must be symmetric")
            object.__setattr__(self, "covariance", cov)


@dataclass(frozen=True)
class ProblemInstance:
    """S aligned regression tasks plus the shared ground metric.

    Immutable after construction; all arrays are set read-only so the
    instance can be shared freely across worker threads.
    """

    designs: np.ndarray  # (S, n, p)
    measurements: np.ndarray  # (S, n)
    metric: GroundMetric | None = None

    def __post_init__(self):
        designs = _readonly(self.designs)
        measurements = _readonly(self.measurements)
        if designs.ndim != 3:
            raise ValueError("designs must have shape (S, n, p)")
        if measurements.ndim != 2:
            raise ValueError("measurements must have shape (S, n)")
        if designs.shape[:2] != measurements.shape:
            raise ValueError(
                f"designs {designs.shape} and measurements "
                f"{measurements.shape} do not align"
            )
        if self.metric is not None and self.metric.n_points != designs.shape[2]:
            raise ValueError("metric size does not match the number of sources")
        object.__setattr__(self, "designs", designs)
        object.__setattr__(self, "measurements", measurements)

    @classmethod
    def from_subjects(cls, subjects, metric=None):
        """Build from a list of ``(design, measurement)`` pairs."""
        designs = np.stack([np.asarray(L, dtype=np.float64) for L, _ in subjects])
        measurements = np.stack([np.asarray(y, dtype=np.float64) for _, y in subjects])
        return cls(designs, measurements, metric)

    @property
    def n_subjects(self):
        return self.designs.shape[0]

    @property
    def n_sensors(self):
        return self.designs.shape[1]

    @property
    def n_sources(self):
        return self.designs.shape[2]

    def subjects(self):
        return list(zip(self.designs, self.measurements))


def whiten(instance, noise):
    """Apply the inverse matrix square root of the noise covariance.

    Every design matrix and measurement vector is left-multiplied by
    ``cov^{-1/2}``, computed by symmetric eigendecomposition so that a
    non positive definite covariance fails with the offending
    eigenvalue reported. The metric is unchanged.
    """
    if noise.covariance is None:
        return instance
    cov = noise.covariance
    if cov.shape[0] != instance.n_sensors:
        raise ValueError(
            f"covariance is {cov.shape[0]}x{cov.shape[0]} but there are "
            f"{instance.n_sensors} sensors"
        )
    eigvals, eigvecs = np.linalg.eigh(cov)
    if eigvals.min() <= 0.0:
        raise ValueError(
            "noise covariance is not positive definite "
            f"(smallest eigenvalue {eigvals.min():.6g})"
        )
    w = eigvecs @ np.diag(1.0 / np.sqrt(eigvals)) @ eigvecs.T
    designs = np.einsum("ij,sjk->sik", w, instance.designs)
    measurements = instance.measurements @ w.T
    return ProblemInstance(designs, measurements, instance.metric)


def depth_weight(design, exponent=0.9):
    """Normalize every column by its norm raised to ``exponent``.

    Returns the reweighted design and the per-column divisors, so that
    coefficient estimates can be mapped back to the original amplitude
    scale (``x_original = x_weighted / weights``).
    """
    if not 0.0 <= exponent <= 1.0:
        raise ValueError(f"exponent must lie in [0, 1], got {exponent}")
    design = np.asarray(design, dtype=np.float64)
    norms = np.linalg.norm(design, axis=0)
    zero_cols = np.flatnonzero(norms == 0.0)
    if zero_cols.size:
        raise ValueError(f"column {zero_cols[0]} of the design is all zero")
    weights = norms**exponent
    return design / weights, weights


def lambda_max(instance):
    """Per-subject smallest penalty at which the l1 solution is zero.

    For the squared loss scaled by 1/(2n), the value is
    ``max_j |L_j^T y| / n`` for each subject. A relative regularization
    level in [0, 1] multiplies these values.
    """
    n = instance.n_sensors
    corr = np.einsum("snp,sn->sp", instance.designs, instance.measurements)
    return np.abs(corr).max(axis=1) / n


def sigma_floor(instance, alpha=0.01):
    """Lower bound for the estimated noise level.

    A small fraction ``alpha`` of the smallest initial standard
    deviation estimate ``||y|| / sqrt(n)`` across subjects.
    """
    if alpha <= 0.0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    n = instance.n_sensors
    norms = np.linalg.norm(instance.measurements, axis=1)
    return alpha * norms.min() / np.sqrt(n)
