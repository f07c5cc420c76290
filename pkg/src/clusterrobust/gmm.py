"""One- and two-step GMM with clustered weights and the robust J test."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Union

import numpy as np
import scipy.linalg as sla
from scipy import stats

from .core import ClusteredSample
from .crve import CovarianceEstimate, outer_sum
from .errors import (
    NonConvergenceWarning,
    RankDeficientJacobian,
    SingularWeight,
    WrongConfig,
    WrongWeightMode,
)
from .inference import EstimateReport, WaldResult
from .linalg import pivoted_qr, qr_gram_inverse, qr_lstsq, symmetrize
from .mle import fd_step

__all__ = [
    "MomentModel",
    "CallableMoments",
    "LinearIV",
    "TransformedMoments",
    "WeightSpec",
    "GmmReport",
    "moment_sums",
    "clustered_weight",
    "conventional_weight",
    "build_weight",
    "gmm_sandwich",
    "gmm_fit",
    "j_test",
]

WEIGHT_MODES = ("identity", "conventional", "clustered")


class MomentModel:
    """Moment function ``m(x, theta)`` with ``l`` moments and ``k`` parameters.

    :meth:`moments` maps an ``n x p`` batch to ``n x l``; :meth:`jacobian`
    returns ``n x l x k`` and defaults to central differences.
    """

    l: int = 1
    k: int = 1

    def moments(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def jacobian(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        h = fd_step(theta)
        out = np.empty((x.shape[0], self.l, theta.size))
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h[j]
            out[:, :, j] = (self.moments(x, theta + e) - self.moments(x, theta - e)) / (2 * h[j])
        return out

    def check_jacobian(self, x, theta) -> float:
        """Largest relative gap between :meth:`jacobian` and finite differences."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        J = self.jacobian(x, theta)
        J_fd = MomentModel.jacobian(self, x, theta)
        return float(np.max(np.abs(J - J_fd) / np.maximum(1.0, np.abs(J))))


@dataclass
class CallableMoments(MomentModel):
    moments_fn: Callable
    l: int
    k: int
    jacobian_fn: Callable | None = None

    def moments(self, x, theta):
        return np.asarray(self.moments_fn(x, theta), dtype=np.float64)

    def jacobian(self, x, theta):
        if self.jacobian_fn is None:
            return MomentModel.jacobian(self, x, theta)
        return np.asarray(self.jacobian_fn(x, theta), dtype=np.float64)


class LinearIV(MomentModel):
    """Moments ``z (y - x'theta)`` built from columns of the sample."""

    def __init__(self, y: int, x, z):
        self.y = int(y)
        self.x = list(x)
        self.z = list(z)
        self.k = len(self.x)
        self.l = len(self.z)
        if self.l < self.k:
            raise WrongConfig(f"need l >= k, got l={self.l}, k={self.k}")

    def moments(self, data, theta):
        e = data[:, self.y] - data[:, self.x] @ theta
        return data[:, self.z] * e[:, None]

    def jacobian(self, data, theta):
        return -np.einsum("ij,ik->ijk", data[:, self.z], data[:, self.x])

    def instrument_weight(self, sample: ClusteredSample) -> np.ndarray:
        """``(1/n) sum_i z_i z_i'``, the weight that makes GMM equal 2SLS."""
        Z = sample.data[:, self.z]
        return Z.T @ Z / sample.n


class TransformedMoments(MomentModel):
    """``A m(x, theta)`` for a fixed ``r x l`` matrix ``A``."""

    def __init__(self, base: MomentModel, A):
        self.base = base
        self.A = np.atleast_2d(np.asarray(A, dtype=np.float64))
        self.l = self.A.shape[0]
        self.k = base.k

    def moments(self, x, theta):
        return self.base.moments(x, theta) @ self.A.T

    def jacobian(self, x, theta):
        return np.einsum("rl,ilk->irk", self.A, self.base.jacobian(x, theta))


@dataclass(frozen=True)
class WeightSpec:
    """How to build the weight matrix.

    ``identity`` ignores the data. ``conventional`` is
    ``(1/n) sum_i v_i v_i'`` with ``v = m - mbar`` (centered) or ``v = m``.
    ``clustered`` is the cluster-sum analogue with the ``n_g**2`` centering
    term, dropped when ``centered=False``.
    """

    mode: str = "clustered"
    centered: bool = True

    def __post_init__(self):
        if self.mode not in WEIGHT_MODES:
            raise WrongConfig(f"weight mode must be one of {WEIGHT_MODES}, got {self.mode!r}")


WeightLike = Union[WeightSpec, np.ndarray]


def moment_sums(sample: ClusteredSample, model: MomentModel, theta):
    """Per-observation moments, their cluster sums and the overall mean."""
    theta = np.asarray(theta, dtype=np.float64)
    m = model.moments(sample.data, theta)
    sums = np.add.reduceat(m, sample.index.offsets, axis=0)
    return m, sums, sums.sum(axis=0) / sample.n


def clustered_weight(
    sample: ClusteredSample, model: MomentModel, theta, centered: bool = True
) -> np.ndarray:
    """``(1/n) sum_g m_g m_g' - (1/n) sum_g n_g**2 mbar mbar'``.

    ``m_g`` are cluster sums of the moments; ``centered=False`` drops the
    second term.
    """
    _, sums, mbar = moment_sums(sample, model, theta)
    W = outer_sum(sums) / sample.n
    if centered:
        ng2 = float(np.sum(sample.index.sizes.astype(np.float64) ** 2))
        W = W - ng2 / sample.n * np.outer(mbar, mbar)
    return symmetrize(W)


def conventional_weight(
    sample: ClusteredSample, model: MomentModel, theta, centered: bool = True
) -> np.ndarray:
    """Observation-level ``(1/n) sum_i v_i v_i'`` that ignores clustering."""
    m, _, mbar = moment_sums(sample, model, theta)
    if centered:
        m = m - mbar
    return symmetrize(m.T @ m / sample.n)


def build_weight(weight: WeightLike, sample, model, theta) -> np.ndarray:
    if isinstance(weight, WeightSpec):
        if weight.mode == "identity":
            return np.eye(model.l)
        if weight.mode == "conventional":
            return conventional_weight(sample, model, theta, weight.centered)
        return clustered_weight(sample, model, theta, weight.centered)
    W = np.atleast_2d(np.asarray(weight, dtype=np.float64))
    if W.shape != (model.l, model.l):
        raise WrongConfig(f"weight matrix must be {model.l} x {model.l}")
    return symmetrize(W)


def _whitener(W: np.ndarray) -> np.ndarray:
    """Lower Cholesky factor ``L`` of ``W``; ``W^-1 = L^-T L^-1``."""
    vals = np.linalg.eigvalsh(W)
    if vals[-1] <= 0 or vals[0] <= 1e-12 * vals[-1]:
        raise SingularWeight(
            f"weight matrix is not positive definite (eigenvalues {vals[0]:.3g} .. {vals[-1]:.3g})"
        )
    return sla.cholesky(W, lower=True)


def _whiten(L, a):
    return sla.solve_triangular(L, a, lower=True)


def gmm_sandwich(Q: np.ndarray, W: np.ndarray, Omega: np.ndarray) -> np.ndarray:
    """``(Q'W^-1Q)^-1 Q'W^-1 Omega W^-1 Q (Q'W^-1Q)^-1``."""
    L = _whitener(W)
    A = _whiten(L, Q)  # L^-1 Q
    fac = pivoted_qr(A)
    if not fac.full_rank:
        raise RankDeficientJacobian("Q'W^-1Q is singular")
    # (Q'W^-1Q)^-1 Q'W^-1 = (A'A)^-1 A' L^-1
    B = qr_lstsq(fac, np.eye(A.shape[0]))  # (A'A)^-1 A'
    C = sla.solve_triangular(L, B.T, lower=True, trans="T").T  # B L^-1
    return symmetrize(C @ Omega @ C.T)


def _efficient_variance(Q: np.ndarray, Omega: np.ndarray) -> np.ndarray:
    """``(Q' Omega^-1 Q)^-1``."""
    L = _whitener(Omega)
    A = _whiten(L, Q)
    fac = pivoted_qr(A)
    if not fac.full_rank:
        raise RankDeficientJacobian("Q'Omega^-1 Q is singular")
    return qr_gram_inverse(fac)


@dataclass(frozen=True)
class _Stage:
    theta: np.ndarray
    iterations: int
    grad_norm: float
    converged: bool
    termination: str


def _minimize(sample, model, L, init, tol, max_iter) -> _Stage:
    """Gauss-Newton on ``mbar' W^-1 mbar`` with Armijo backtracking."""
    x = sample.data
    theta = np.array(init, dtype=np.float64)

    def resid(t):
        _, _, mbar = moment_sums(sample, model, t)
        return _whiten(L, mbar)

    r = resid(theta)
    f = float(r @ r)
    it = 0
    termination = "max_iter"
    while True:
        A = _whiten(L, model.jacobian(x, theta).mean(axis=0))
        grad = A.T @ r
        gnorm = float(np.linalg.norm(grad))
        if gnorm <= tol:
            termination = "gradient"
            break
        if it >= max_iter:
            break
        fac = pivoted_qr(A)
        if not fac.full_rank:
            raise RankDeficientJacobian(
                f"moment Jacobian has rank {fac.rank} < {model.k} at theta={theta.tolist()}"
            )
        d = -qr_lstsq(fac, r)
        slope = 2.0 * float(grad @ d)
        step = 1.0
        accepted = False
        for _ in range(60):
            cand = theta + step * d
            rc = resid(cand)
            fc = float(rc @ rc)
            if np.isfinite(fc) and fc <= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # criterion differences below rounding; accept if the gradient shrinks
            cand = theta + d
            rc = resid(cand)
            fc = float(rc @ rc)
            Ac = _whiten(L, model.jacobian(x, cand).mean(axis=0))
            if not (np.isfinite(fc) and np.linalg.norm(Ac.T @ rc) < gnorm):
                termination = "line_search"
                break
        theta, r, f = cand, rc, fc
        it += 1
    return _Stage(theta, it, gnorm, termination == "gradient", termination)


@dataclass(frozen=True, eq=False)
class GmmReport(EstimateReport):
    """GMM fit. ``Omega_hat`` is the clustered moment covariance at the estimate."""

    Q_hat: np.ndarray
    W_hat: np.ndarray
    Omega_hat: CovarianceEstimate
    mbar: np.ndarray
    J_statistic: float
    J_df: int
    J_p_value: float
    weight: WeightSpec | None
    steps: int
    iterations: int
    grad_norm: float
    converged: bool
    termination: str
    first_step_params: np.ndarray | None

    @property
    def theta_hat(self) -> np.ndarray:
        return self.params

    @property
    def l(self) -> int:
        return self.Q_hat.shape[0]


def gmm_fit(
    sample: ClusteredSample,
    model: MomentModel,
    init,
    weight: WeightLike = WeightSpec(),
    two_step: bool = True,
    first_step: WeightLike = WeightSpec("identity"),
    *,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> GmmReport:
    """Minimize ``n mbar(theta)' W^-1 mbar(theta)``.

    With ``two_step`` the criterion is first minimized under ``first_step``
    (identity by default), then ``weight`` (centered clustered by default)
    is rebuilt at that preliminary estimate and the criterion minimized
    again. Without ``two_step`` only ``weight`` is used, evaluated at
    ``init`` when it depends on the parameter.

    The variance is ``(Q'Omega^-1 Q)^-1`` when the final weight is
    clustered, and the general sandwich otherwise. ``J_statistic`` is the
    final criterion value; its chi-square p-value is only reported for the
    clustered weight.
    """
    theta0 = np.array(init, dtype=np.float64).ravel()
    if theta0.size != model.k or not np.all(np.isfinite(theta0)):
        raise WrongConfig(f"init must be a finite vector of length {model.k}")
    if model.l < model.k:
        raise WrongConfig("GMM needs at least as many moments as parameters")

    first = None
    stages = []
    if two_step:
        L1 = _whitener(build_weight(first_step, sample, model, theta0))
        s1 = _minimize(sample, model, L1, theta0, tol, max_iter)
        stages.append(s1)
        first = s1.theta
        W = build_weight(weight, sample, model, first)
        start = first
    else:
        W = build_weight(weight, sample, model, theta0)
        start = theta0
    L = _whitener(W)
    final = _minimize(sample, model, L, start, tol, max_iter)
    stages.append(final)
    converged = all(s.converged for s in stages)
    if not converged:
        bad = next(s for s in stages if not s.converged)
        warnings.warn(
            f"GMM stopped ({bad.termination}) with gradient norm {bad.grad_norm:.3g}",
            NonConvergenceWarning,
            stacklevel=2,
        )

    theta = final.theta
    n = sample.n
    _, _, mbar = moment_sums(sample, model, theta)
    Q = model.jacobian(sample.data, theta).mean(axis=0)
    if pivoted_qr(Q).rank < model.k:
        raise RankDeficientJacobian("Q_hat is not of full column rank")
    clustered = isinstance(weight, WeightSpec) and weight.mode == "clustered"
    omega_centered = weight.centered if clustered else True
    Omega = clustered_weight(sample, model, theta, omega_centered)
    if clustered:
        V = _efficient_variance(Q, Omega)
    else:
        V = gmm_sandwich(Q, W, Omega)

    rw = _whiten(L, mbar)
    J = float(n * rw @ rw)
    df = model.l - model.k
    if clustered:
        p_value = 1.0 if df == 0 else float(stats.chi2.sf(J, df))
    else:
        p_value = float("nan")
    return GmmReport(
        params=theta,
        V_hat=V,
        n=n,
        G=sample.G,
        Q_hat=Q,
        W_hat=W,
        Omega_hat=CovarianceEstimate.build(Omega, "weight"),
        mbar=mbar,
        J_statistic=J,
        J_df=df,
        J_p_value=p_value,
        weight=weight if isinstance(weight, WeightSpec) else None,
        steps=len(stages),
        iterations=sum(s.iterations for s in stages),
        grad_norm=final.grad_norm,
        converged=converged,
        termination=final.termination,
        first_step_params=first,
    )


def j_test(report: GmmReport) -> WaldResult:
    """Over-identification test from a clustered-weight fit.

    ``n mbar' W^-1 mbar`` referred to chi-square with ``l - k`` degrees of
    freedom. Any other weight leaves the statistic without a chi-square
    limit under clustering, so it is refused.
    """
    if report.weight is None or report.weight.mode != "clustered":
        mode = "fixed matrix" if report.weight is None else report.weight.mode
        raise WrongWeightMode(
            f"the J test needs the clustered weight, this fit used {mode!r}"
        )
    df = report.J_df
    if df == 0:
        return WaldResult(report.J_statistic, 0, 1.0)
    return WaldResult(report.J_statistic, df, float(stats.chi2.sf(report.J_statistic, df)))
