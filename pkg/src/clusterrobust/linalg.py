"""Rank-revealing solves and symmetric matrix helpers.

Inverses in the estimator formulas are never formed explicitly; they are
applied through pivoted QR factorizations so that near-collinearity shows up
as a rank deficiency instead of a silently huge inverse.
"""

from __future__ import annotations

from typing import NamedTuple

import numpy as np
import scipy.linalg as sla

from .errors import IndefiniteMatrix, NotSymmetric


class PivotedQR(NamedTuple):
    q: np.ndarray
    r: np.ndarray
    perm: np.ndarray
    rank: int

    @property
    def full_rank(self) -> bool:
        return self.rank == self.r.shape[1]


def pivoted_qr(a: np.ndarray, rtol: float | None = None) -> PivotedQR:
    """Economic QR with column pivoting and numerical rank."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    q, r, perm = sla.qr(a, mode="economic", pivoting=True)
    diag = np.abs(np.diag(r))
    if rtol is None:
        rtol = max(a.shape) * np.finfo(np.float64).eps
    rank = int(np.sum(diag > rtol * diag[0])) if diag.size and diag[0] > 0 else 0
    return PivotedQR(q, r, perm, rank)


def qr_lstsq(fac: PivotedQR, b: np.ndarray) -> np.ndarray:
    """Least-squares solution of ``A x = b`` from a full-rank factorization."""
    k = fac.r.shape[1]
    z = fac.q.T @ b
    sol = sla.solve_triangular(fac.r[:k, :k], z[:k])
    x = np.empty_like(sol)
    x[fac.perm] = sol
    return x


def qr_gram_inverse(fac: PivotedQR) -> np.ndarray:
    """``(A'A)^{-1}`` from a full-rank factorization of ``A``."""
    k = fac.r.shape[1]
    rinv = sla.solve_triangular(fac.r[:k, :k], np.eye(k))
    inner = rinv @ rinv.T
    out = np.empty_like(inner)
    out[np.ix_(fac.perm, fac.perm)] = inner
    return symmetrize(out)


def solve_full_rank(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Solve square ``a x = b`` via pivoted QR; ``None`` if ``a`` is singular."""
    fac = pivoted_qr(a)
    if not fac.full_rank:
        return None
    return qr_lstsq(fac, b)


def symmetrize(m: np.ndarray) -> np.ndarray:
    return 0.5 * (m + m.T)


def is_symmetric(m: np.ndarray, rtol: float = 1e-10) -> bool:
    scale = np.max(np.abs(m)) if m.size else 0.0
    if scale == 0:
        return True
    return bool(np.max(np.abs(m - m.T)) <= rtol * scale)


class InverseSqrt(NamedTuple):
    """Result of :func:`symmetric_inverse_sqrt`."""

    matrix: np.ndarray
    clipped: bool
    rank: int

    @property
    def pinv(self) -> np.ndarray:
        """Pseudo-inverse ``S @ S`` of the original matrix."""
        return self.matrix @ self.matrix


def symmetric_inverse_sqrt(
    m: np.ndarray,
    *,
    clip: float = 1e-12,
    neg_tol: float = 1e-10,
) -> InverseSqrt:
    """Symmetric inverse square root of a positive semidefinite matrix.

    Eigenvalues at or below ``clip * lambda_max`` are treated as zero and
    pseudo-inverted, so ``S @ M @ S`` is the projector onto the retained
    eigenspace. ``clipped`` reports whether any eigenvalue was dropped.

    Raises
    ------
    NotSymmetric
        If ``m`` is not symmetric to ``1e-10`` relative.
    IndefiniteMatrix
        If an eigenvalue is below ``-neg_tol * ||m||``.
    """
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    if m.shape[0] != m.shape[1]:
        raise NotSymmetric(f"matrix of shape {m.shape} is not square")
    if not is_symmetric(m):
        raise NotSymmetric("matrix is not symmetric")
    vals, vecs = np.linalg.eigh(symmetrize(m))
    norm = float(np.max(np.abs(vals))) if vals.size else 0.0
    if vals.size and vals[0] < -neg_tol * norm:
        raise IndefiniteMatrix(
            f"smallest eigenvalue {vals[0]:.6g} is negative (norm {norm:.6g})"
        )
    keep = vals > clip * max(norm, 0.0) if norm > 0 else np.zeros_like(vals, bool)
    inv_root = np.zeros_like(vals)
    inv_root[keep] = 1.0 / np.sqrt(vals[keep])
    s = (vecs * inv_root) @ vecs.T
    return InverseSqrt(symmetrize(s), bool((~keep).any()), int(keep.sum()))


def eig_summary(m: np.ndarray) -> tuple[float, float]:
    """Smallest eigenvalue and condition number ``|lambda|max / |lambda|min``."""
    vals = np.linalg.eigvalsh(symmetrize(m))
    if vals.size == 0:
        return float("nan"), float("nan")
    absvals = np.abs(vals)
    lo = absvals.min()
    cond = float("inf") if lo == 0 else float(absvals.max() / lo)
    return float(vals[0]), cond
