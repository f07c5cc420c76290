"""OLS and 2SLS with cluster-robust sandwich variance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .core import ClusterIndex, ClusteredSample
from .crve import CovarianceEstimate, outer_sum
from .errors import (
    ConditionNumberWarning,
    LengthMismatch,
    RankDeficientDesign,
    SingularInstrumentMoment,
    WrongConfig,
)
from .inference import EstimateReport
from .linalg import pivoted_qr, qr_gram_inverse, qr_lstsq, symmetrize

__all__ = [
    "LinearDesign",
    "DofAdjustment",
    "RegressionReport",
    "fit_tsls",
    "fit_ols",
    "naive_ols_se",
]

DOF_MODES = ("none", "hansen", "stata")
COND_WARN = 1e12


@dataclass(frozen=True, eq=False)
class LinearDesign:
    """Structural equation ``y = X b + e`` with instruments ``Z`` (``l >= k``)."""

    y: np.ndarray
    X: np.ndarray
    Z: np.ndarray
    index: ClusterIndex

    def __post_init__(self):
        y = np.asarray(self.y, dtype=np.float64).ravel()
        X = _as_2d(self.X)
        Z = _as_2d(self.Z)
        n = self.index.n
        if not (y.shape[0] == X.shape[0] == Z.shape[0] == n):
            raise LengthMismatch("y, X, Z must all have index.n rows")
        if Z.shape[1] < X.shape[1]:
            raise WrongConfig(
                f"need at least as many instruments ({Z.shape[1]}) as regressors ({X.shape[1]})"
            )
        for name, arr in (("y", y), ("X", X), ("Z", Z)):
            if not np.all(np.isfinite(arr)):
                raise WrongConfig(f"{name} contains non-finite values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "Z", Z)

    @classmethod
    def from_sample(cls, sample: ClusteredSample, y: int, x, z=None) -> LinearDesign:
        """Pick columns of a sample; ``z=None`` means OLS (``Z = X``)."""
        d = sample.data
        X = d[:, list(x)]
        Z = X if z is None else d[:, list(z)]
        return cls(d[:, y], X, Z, sample.index)

    @property
    def n(self) -> int:
        return self.index.n

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def l(self) -> int:
        return self.Z.shape[1]


def _as_2d(a) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    return a[:, None] if a.ndim == 1 else a


@dataclass(frozen=True)
class DofAdjustment:
    """Finite-sample multiplier ``d_n`` applied to the sandwich variance.

    ``none`` gives 1, ``hansen`` gives ``G/(G-1)`` and ``stata`` gives
    ``((n-1)/(n-k)) * (G/(G-1))``.
    """

    mode: str = "stata"

    def __post_init__(self):
        if self.mode not in DOF_MODES:
            raise WrongConfig(f"dof mode must be one of {DOF_MODES}, got {self.mode!r}")

    def value(self, n: int, k: int, G: int) -> float:
        if self.mode == "none":
            return 1.0
        if G < 2:
            raise WrongConfig("dof adjustment needs at least two clusters")
        if self.mode == "hansen":
            return G / (G - 1)
        if n <= k:
            raise WrongConfig("stata dof adjustment needs n > k")
        return (n - 1) / (n - k) * (G / (G - 1))


@dataclass(frozen=True, eq=False)
class RegressionReport(EstimateReport):
    """OLS/2SLS fit. ``V_hat`` already includes the ``d_n`` multiplier."""

    Q_hat: np.ndarray
    W_hat: np.ndarray
    Omega_hat: CovarianceEstimate
    dof: DofAdjustment
    d_n: float
    residuals: np.ndarray

    @property
    def beta_hat(self) -> np.ndarray:
        return self.params


def fit_tsls(design: LinearDesign, dof: DofAdjustment | str = "stata") -> RegressionReport:
    """Two-stage least squares with cluster-robust variance.

    The coefficient is computed by regressing ``y`` on the projection of
    ``X`` onto the column space of ``Z``, which is algebraically the usual
    closed form. The variance is

        V = d_n (Q'W^-1 Q)^-1 Q'W^-1 Omega W^-1 Q (Q'W^-1 Q)^-1

    with ``Q = Z'X/n``, ``W = Z'Z/n`` and ``Omega = (1/n) sum_g Z_g'e_g e_g'Z_g``.

    Raises
    ------
    SingularInstrumentMoment
        ``Z`` is rank deficient, so ``W`` is not invertible.
    RankDeficientDesign
        The projected regressors are rank deficient.
    """
    if isinstance(dof, str):
        dof = DofAdjustment(dof)
    n, k, G = design.n, design.k, design.index.G
    X, Z, y = design.X, design.Z, design.y

    zfac = pivoted_qr(Z)
    if not zfac.full_rank:
        raise SingularInstrumentMoment(
            f"instrument matrix has rank {zfac.rank} < {design.l}"
        )
    qz = zfac.q[:, : design.l]
    xhat = qz @ (qz.T @ X)
    xfac = pivoted_qr(xhat)
    if not xfac.full_rank:
        raise RankDeficientDesign(
            f"projected regressors have rank {xfac.rank} < {k}"
        )
    beta = qr_lstsq(xfac, y)
    resid = y - X @ beta

    # (Q'W^-1 Q)^-1 = n (Xhat'Xhat)^-1
    bread = n * qr_gram_inverse(xfac)
    rdiag = np.abs(np.diag(xfac.r))
    cond = (rdiag.max() / rdiag.min()) ** 2
    if cond > COND_WARN:
        warnings.warn(
            f"condition number of Q'W^-1Q is {cond:.3g}", ConditionNumberWarning, stacklevel=2
        )

    scores = Z * resid[:, None]
    score_sums = np.add.reduceat(scores, design.index.offsets, axis=0)
    omega = outer_sum(score_sums) / n
    Q = Z.T @ X / n
    W = Z.T @ Z / n
    # W^-1 Q, with W^-1 = n (Z'Z)^-1 from the Z factorization
    A = n * qr_gram_inverse(zfac) @ Q
    meat = A.T @ omega @ A
    d_n = dof.value(n, k, G)
    V = d_n * symmetrize(bread @ meat @ bread)
    return RegressionReport(
        params=beta,
        V_hat=V,
        n=n,
        G=G,
        Q_hat=Q,
        W_hat=symmetrize(W),
        Omega_hat=CovarianceEstimate.build(omega, "score"),
        dof=dof,
        d_n=d_n,
        residuals=resid,
    )


def fit_ols(y, X, index: ClusterIndex, dof: DofAdjustment | str = "stata") -> RegressionReport:
    """OLS with cluster-robust variance: 2SLS with ``Z = X``.

    Collinear regressors raise :class:`RankDeficientDesign`.
    """
    X = _as_2d(X)
    fac = pivoted_qr(X)
    if not fac.full_rank:
        raise RankDeficientDesign(f"regressor matrix has rank {fac.rank} < {X.shape[1]}")
    return fit_tsls(LinearDesign(y, X, X, index), dof)


def naive_ols_se(report: RegressionReport, X) -> np.ndarray:
    """Conventional homoskedastic standard errors ``sqrt(s^2 diag((X'X)^-1))``.

    Ignores clustering entirely; used as a negative control.
    """
    X = _as_2d(X)
    n, k = X.shape
    s2 = float(report.residuals @ report.residuals) / (n - k)
    fac = pivoted_qr(X)
    return np.sqrt(s2 * np.diag(qr_gram_inverse(fac)))
