"""Shared estimate report plus Wald tests and standard errors for it."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import stats

from .errors import RankDeficientRestriction
from .linalg import pivoted_qr, symmetric_inverse_sqrt, symmetrize

__all__ = ["EstimateReport", "WaldResult", "wald_test", "standard_errors"]


@dataclass(frozen=True, eq=False)
class EstimateReport:
    """Coefficients and sandwich variance shared by every estimator.

    ``V_hat`` is the asymptotic variance of ``sqrt(n) (params - truth)``;
    standard errors are ``sqrt(diag(V_hat) / n)``.
    """

    params: np.ndarray
    V_hat: np.ndarray
    n: int
    G: int

    @property
    def se(self) -> np.ndarray:
        d = np.diag(self.V_hat) / self.n
        with np.errstate(invalid="ignore"):
            return np.where(d >= 0, np.sqrt(np.abs(d)), np.nan)

    @property
    def t_ratios(self) -> np.ndarray:
        se = self.se
        with np.errstate(divide="ignore", invalid="ignore"):
            return self.params / se

    @property
    def k(self) -> int:
        return self.params.shape[0]


@dataclass(frozen=True)
class WaldResult:
    statistic: float
    df: int
    p_value: float

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "df": self.df, "p_value": self.p_value}


def _restriction(report: EstimateReport, R) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.ndim == 1:
        R = R[:, None]
    if R.shape[0] != report.k:
        raise RankDeficientRestriction(
            f"restriction matrix has {R.shape[0]} rows, expected {report.k}"
        )
    return R


def wald_test(report: EstimateReport, R, r0=None) -> WaldResult:
    """Wald test of ``R' params = r0`` for a ``k x q`` restriction matrix.

    The statistic ``n (R'b - r0)' (R' V R)^{-1} (R'b - r0)`` is referred to
    the chi-square distribution with ``q`` degrees of freedom.
    """
    R = _restriction(report, R)
    q = R.shape[1]
    if q > report.k or not pivoted_qr(R).full_rank:
        raise RankDeficientRestriction("restriction matrix must have full column rank")
    r0 = np.zeros(q) if r0 is None else np.broadcast_to(np.asarray(r0, float), (q,))
    diff = R.T @ report.params - r0
    middle = symmetrize(R.T @ report.V_hat @ R)
    root = symmetric_inverse_sqrt(middle)
    if root.rank < q:
        raise RankDeficientRestriction("R' V R is singular")
    z = root.matrix @ diff
    stat = float(report.n * z @ z)
    return WaldResult(stat, q, float(stats.chi2.sf(stat, q)))


def standard_errors(report: EstimateReport, R=None) -> np.ndarray:
    """Square roots of the diagonal of ``R' V R / n`` (``R = I`` by default)."""
    if R is None:
        return report.se
    R = _restriction(report, R)
    return np.sqrt(np.clip(np.diag(R.T @ report.V_hat @ R), 0, None) / report.n)
