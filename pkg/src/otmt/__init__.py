"""Sparse multi-task regression coupled by unbalanced optimal transport."""

from .problem import (
    GroundMetric,
    NoiseModel,
    ProblemInstance,
    SignedVector,
    depth_weight,
    lambda_max,
    sigma_floor,
    whiten,
)
from .ot import (
    BarycenterState,
    OtKernel,
    OtParams,
    barycenter,
    build_kernel,
    default_gamma,
    exact_emd,
    signed_distance,
    unbalanced_distance,
)

__version__ = "0.1.0"
