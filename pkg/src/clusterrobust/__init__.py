"""Cluster-robust estimation and inference.

Cluster sums and covariance estimators, OLS/2SLS, pooled MLE and GMM with
clustered sandwich variances, Wald and J tests, cluster-size diagnostics and
a Monte Carlo laboratory.
"""

__version__ = "0.1.0"

from .core import (  # noqa: E402
    ClusterIndex,
    ClusteredSample,
    HeterogeneityDiagnostics,
    build_sample,
    cluster_sums,
    heterogeneity_diagnostics,
    sample_mean,
)
from .crve import (  # noqa: E402
    CovarianceEstimate,
    crve_common_mean,
    crve_known_mean,
    studentize_mean,
    vectorized_second_moments,
)
from .gmm import LinearIV, MomentModel, WeightSpec, gmm_fit, j_test  # noqa: E402
from .inference import EstimateReport, WaldResult, standard_errors, wald_test  # noqa: E402
from .linalg import symmetric_inverse_sqrt  # noqa: E402
from .linear import DofAdjustment, LinearDesign, fit_ols, fit_tsls  # noqa: E402
from .mle import LikelihoodModel, fit_pseudo_mle, make_model, mle_sandwich  # noqa: E402

__all__ = [
    "__version__",
    "ClusterIndex",
    "ClusteredSample",
    "HeterogeneityDiagnostics",
    "build_sample",
    "cluster_sums",
    "heterogeneity_diagnostics",
    "sample_mean",
    "CovarianceEstimate",
    "crve_common_mean",
    "crve_known_mean",
    "studentize_mean",
    "vectorized_second_moments",
    "LinearIV",
    "MomentModel",
    "WeightSpec",
    "gmm_fit",
    "j_test",
    "EstimateReport",
    "WaldResult",
    "standard_errors",
    "wald_test",
    "symmetric_inverse_sqrt",
    "DofAdjustment",
    "LinearDesign",
    "fit_ols",
    "fit_tsls",
    "LikelihoodModel",
    "fit_pseudo_mle",
    "make_model",
    "mle_sandwich",
]
