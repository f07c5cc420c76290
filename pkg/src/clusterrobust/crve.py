"""Cluster-robust covariance estimators for sample means."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClusteredSample, cluster_sums, sample_mean
from .errors import DegenerateSample, SingularCovariance
from .linalg import eig_summary, symmetric_inverse_sqrt, symmetrize

__all__ = [
    "CovarianceEstimate",
    "crve_known_mean",
    "crve_common_mean",
    "studentize_mean",
    "vectorized_second_moments",
    "outer_sum",
]

KINDS = ("known_mean", "common_mean", "score", "weight")


@dataclass(frozen=True, eq=False)
class CovarianceEstimate:
    """A symmetric covariance matrix with its eigenvalue summary.

    ``kind`` records how it was built: ``known_mean`` (uncentered cluster
    outer products), ``common_mean`` (centered with ``n_g**2`` weights),
    ``score`` (estimating-equation meat) or ``weight`` (a GMM weight).
    """

    matrix: np.ndarray
    kind: str
    min_eigenvalue: float
    condition_number: float
    dof_adjustment: float = 1.0

    @classmethod
    def build(cls, matrix, kind: str, dof_adjustment: float = 1.0):
        if kind not in KINDS:
            raise ValueError(f"unknown covariance kind {kind!r}")
        m = symmetrize(np.atleast_2d(np.asarray(matrix, dtype=np.float64)))
        m.setflags(write=False)
        lo, cond = eig_summary(m)
        return cls(m, kind, lo, cond, float(dof_adjustment))

    @property
    def dim(self) -> int:
        return self.matrix.shape[0]

    def __array__(self, dtype=None, copy=None):
        return np.asarray(self.matrix, dtype=dtype)


def outer_sum(rows: np.ndarray) -> np.ndarray:
    """``sum_g r_g r_g'`` for the rows of a ``G x d`` array."""
    return rows.T @ rows


def crve_known_mean(sample: ClusteredSample) -> CovarianceEstimate:
    """``(1/n) sum_g S_g S_g'`` for cluster sums ``S_g``.

    The caller asserts the observations have mean zero; nothing is checked.
    """
    sums = cluster_sums(sample)
    return CovarianceEstimate.build(outer_sum(sums) / sample.n, "known_mean")


def crve_common_mean(sample: ClusteredSample) -> CovarianceEstimate:
    """Cluster-robust covariance of the mean under a common expectation.

    Uses the subtraction form
    ``(1/n) sum_g S_g S_g' - (1/n) sum_g n_g**2 xbar xbar'``,
    With equal cluster sizes it coincides with the centered form
    ``(1/n) sum_g (S_g - n_g xbar)(S_g - n_g xbar)'`` and is invariant to
    shifting every observation by a constant vector. With unequal sizes
    neither holds: a shift ``a`` adds ``D a' + a D'`` with
    ``D = (1/n) sum_g n_g (S_g - n_g xbar)``, and the matrix need not be
    positive semidefinite, so check ``min_eigenvalue``.
    """
    if sample.G < 2:
        raise DegenerateSample("common-mean CRVE needs at least two clusters")
    # evaluate on data shifted by one row to limit cancellation, then add
    # back the exact shift correction so the value is the unshifted formula
    a = sample.data[0]
    sums = cluster_sums(sample.with_data(sample.data - a))
    n = sample.n
    sizes = sample.index.sizes.astype(np.float64)
    xbar = sums.sum(axis=0) / n
    ng2 = float(np.sum(sizes**2))
    omega = outer_sum(sums) / n - ng2 / n * np.outer(xbar, xbar)
    D = sizes @ (sums - np.outer(sizes, xbar)) / n
    omega = omega + np.outer(D, a) + np.outer(a, D)
    return CovarianceEstimate.build(omega, "common_mean")


def studentize_mean(sample: ClusteredSample, mu0) -> np.ndarray:
    """``Omega_hat^{-1/2} sqrt(n) (xbar - mu0)`` using :func:`crve_common_mean`.

    Negative eigenvalues, which the common-mean estimator can produce when
    cluster sizes differ, are clipped to zero along with tiny ones, so the
    corresponding directions are dropped rather than raising.
    """
    mu0 = np.broadcast_to(np.asarray(mu0, dtype=np.float64), (sample.p,))
    omega = crve_common_mean(sample)
    root = symmetric_inverse_sqrt(omega.matrix, neg_tol=np.inf)
    if root.rank == 0:
        raise SingularCovariance("covariance estimate is zero after clipping")
    return root.matrix @ (np.sqrt(sample.n) * (sample_mean(sample) - mu0))


def vectorized_second_moments(
    sample: ClusteredSample, centered: bool = False
) -> tuple[np.ndarray, CovarianceEstimate]:
    """Clustered second-moment statistic and its covariance.

    Returns ``fbar = (1/n) sum_g f_g`` with ``f_g = S_g kron S_g`` (or the
    centered ``(S_g - n_g xbar) kron (S_g - n_g xbar)``), a vector of length
    ``p**2``, together with the plug-in estimate of the covariance of
    ``sqrt(n) fbar``,

        (1/n) sum_g f_g f_g' - (G/n) fhat fhat',   fhat = (1/G) sum_g f_g,

    which treats ``f_g`` as cluster-level draws sharing a common mean. The
    plug-in is an extension (no feasible estimator accompanies the
    second-moment CLT) and is meant for clusters of similar size.
    """
    sums = cluster_sums(sample)
    if centered:
        sums = sums - np.outer(sample.index.sizes, sample_mean(sample))
    G, p = sums.shape
    f = np.einsum("gi,gj->gij", sums, sums).reshape(G, p * p)
    fbar = f.sum(axis=0) / sample.n
    fhat = f.mean(axis=0)
    omega = (outer_sum(f) - G * np.outer(fhat, fhat)) / sample.n
    return fbar, CovarianceEstimate.build(omega, "common_mean")
