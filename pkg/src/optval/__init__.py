"""Optimal design of validation experiments for predictive models."""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    Box,
    Dirac,
    Empirical,
    ModelFunctional,
    Normal,
    ParameterVector,
    Product,
    RngSpec,
    Uniform,
    empirical_cdf,
    lhs_sample,
    sample,
)
from .sensitivity import (  # noqa: E402
    InfluenceMatrix,
    eig_sym,
    influence_matrix,
    normalized_distance,
    spectral_distance,
)

__all__ = [
    "Box",
    "Dirac",
    "Empirical",
    "ModelFunctional",
    "Normal",
    "ParameterVector",
    "Product",
    "RngSpec",
    "Uniform",
    "empirical_cdf",
    "lhs_sample",
    "sample",
    "InfluenceMatrix",
    "eig_sym",
    "influence_matrix",
    "normalized_distance",
    "spectral_distance",
]
