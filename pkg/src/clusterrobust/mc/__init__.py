"""Monte Carlo laboratory: clustered DGPs and reproducible experiments."""

from .dgp import FAMILIES, DgpSpec, generate, theoretical_cluster_variance
from .experiments import (
    EstimatorConfig,
    IvDgpConfig,
    McResult,
    coverage_experiment,
    jsize_experiment,
    rate_experiment,
    second_moment_clt_check,
)
from .rng import stream

__all__ = [
    "FAMILIES",
    "DgpSpec",
    "generate",
    "theoretical_cluster_variance",
    "EstimatorConfig",
    "IvDgpConfig",
    "McResult",
    "coverage_experiment",
    "jsize_experiment",
    "rate_experiment",
    "second_moment_clt_check",
    "stream",
]
