"""Pooled (pseudo) maximum likelihood with clustered sandwich variance."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable

import numpy as np
import scipy.linalg as sla
from scipy.special import gammaln

from .core import ClusteredSample
from .crve import CovarianceEstimate, outer_sum
from .errors import (
    NonConvergenceWarning,
    NonFiniteObjective,
    SingularHessian,
    WrongConfig,
)
from .inference import EstimateReport
from .linalg import pivoted_qr, qr_lstsq, symmetrize

__all__ = [
    "LikelihoodModel",
    "CallableLikelihood",
    "GaussianLocation",
    "PoissonLogRate",
    "Logit",
    "MODELS",
    "make_model",
    "MleReport",
    "MleSandwich",
    "fit_pseudo_mle",
    "mle_sandwich",
    "fd_step",
]


def fd_step(theta: np.ndarray, rel: float = 1e-6) -> np.ndarray:
    """Central-difference step ``rel * max(1, |theta_j|)`` per coordinate."""
    return rel * np.maximum(1.0, np.abs(theta))


class LikelihoodModel:
    """Marginal density ``f(x, theta)`` evaluated on a batch of rows.

    Subclasses implement :meth:`log_density` for an ``n x p`` array and may
    override :meth:`score` (``n x k``) and :meth:`hessian` (``n x k x k``);
    otherwise central finite differences are used.
    """

    k: int = 1
    bounds: tuple[np.ndarray, np.ndarray] | None = None

    def log_density(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def score(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        h = fd_step(theta)
        out = np.empty((x.shape[0], theta.size))
        for j in range(theta.size):
            e = np.zeros_like(theta)
            e[j] = h[j]
            out[:, j] = (self.log_density(x, theta + e) - self.log_density(x, theta - e)) / (
                2 * h[j]
            )
        return out

    def hessian(self, x: np.ndarray, theta: np.ndarray) -> np.ndarray:
        theta = np.asarray(theta, dtype=np.float64)
        k = theta.size
        out = np.empty((x.shape[0], k, k))
        if self._has_score():
            h = fd_step(theta)
            for j in range(k):
                e = np.zeros_like(theta)
                e[j] = h[j]
                out[:, :, j] = (self.score(x, theta + e) - self.score(x, theta - e)) / (2 * h[j])
        else:
            # second differences of the log density need a larger step
            h = fd_step(theta, 1e-4)
            f0 = self.log_density(x, theta)
            for i in range(k):
                ei = np.zeros_like(theta)
                ei[i] = h[i]
                out[:, i, i] = (
                    self.log_density(x, theta + ei) - 2 * f0 + self.log_density(x, theta - ei)
                ) / h[i] ** 2
                for j in range(i):
                    ej = np.zeros_like(theta)
                    ej[j] = h[j]
                    v = (
                        self.log_density(x, theta + ei + ej)
                        - self.log_density(x, theta + ei - ej)
                        - self.log_density(x, theta - ei + ej)
                        + self.log_density(x, theta - ei - ej)
                    ) / (4 * h[i] * h[j])
                    out[:, i, j] = out[:, j, i] = v
        return 0.5 * (out + out.transpose(0, 2, 1))

    def _has_score(self) -> bool:
        return type(self).score is not LikelihoodModel.score

    def check_derivatives(self, x, theta) -> tuple[float, float]:
        """Largest relative discrepancy of score and Hessian vs finite differences."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        theta = np.asarray(theta, dtype=np.float64)
        s = self.score(x, theta)
        s_fd = LikelihoodModel.score(self, x, theta)
        H = self.hessian(x, theta)
        H_fd = LikelihoodModel.hessian(_ScoreOnly(self), x, theta)
        es = np.max(np.abs(s - s_fd) / np.maximum(1.0, np.abs(s)))
        eh = np.max(np.abs(H - H_fd) / np.maximum(1.0, np.abs(H)))
        return float(es), float(eh)


class _ScoreOnly(LikelihoodModel):
    """Wrapper exposing a model's analytic score but the generic Hessian."""

    def __init__(self, model: LikelihoodModel):
        self._m = model
        self.k = model.k

    def log_density(self, x, theta):
        return self._m.log_density(x, theta)

    def score(self, x, theta):
        return self._m.score(x, theta)


@dataclass
class CallableLikelihood(LikelihoodModel):
    """Model assembled from plain functions of ``(x, theta)``."""

    log_density_fn: Callable
    k: int = 1
    score_fn: Callable | None = None
    hessian_fn: Callable | None = None
    bounds: tuple | None = None

    def log_density(self, x, theta):
        return np.asarray(self.log_density_fn(x, theta), dtype=np.float64)

    def score(self, x, theta):
        if self.score_fn is None:
            return LikelihoodModel.score(self, x, theta)
        return np.asarray(self.score_fn(x, theta), dtype=np.float64)

    def hessian(self, x, theta):
        if self.hessian_fn is None:
            return LikelihoodModel.hessian(self, x, theta)
        return np.asarray(self.hessian_fn(x, theta), dtype=np.float64)

    def _has_score(self) -> bool:
        return self.score_fn is not None


class GaussianLocation(LikelihoodModel):
    """``N(theta, I_p)`` with ``theta`` the ``p``-vector mean."""

    def __init__(self, p: int = 1):
        self.k = p

    def log_density(self, x, theta):
        d = x - theta
        return -0.5 * np.sum(d * d, axis=1) - 0.5 * self.k * np.log(2 * np.pi)

    def score(self, x, theta):
        return x - theta

    def hessian(self, x, theta):
        return np.broadcast_to(-np.eye(self.k), (x.shape[0], self.k, self.k)).copy()


class PoissonLogRate(LikelihoodModel):
    """Poisson counts with rate ``exp(theta)``; one column of counts."""

    k = 1

    def log_density(self, x, theta):
        y = x[:, 0]
        return y * theta[0] - np.exp(theta[0]) - gammaln(y + 1)

    def score(self, x, theta):
        return (x[:, 0] - np.exp(theta[0]))[:, None]

    def hessian(self, x, theta):
        return np.full((x.shape[0], 1, 1), -np.exp(theta[0]))


class Logit(LikelihoodModel):
    """Binary logit. Column 0 is the 0/1 outcome, the rest are covariates."""

    def __init__(self, k: int):
        self.k = k

    def log_density(self, x, theta):
        eta = x[:, 1:] @ theta
        return x[:, 0] * eta - np.logaddexp(0.0, eta)

    def score(self, x, theta):
        w = x[:, 1:]
        prob = 0.5 * (1 + np.tanh(0.5 * (w @ theta)))
        return (x[:, 0] - prob)[:, None] * w

    def hessian(self, x, theta):
        w = x[:, 1:]
        prob = 0.5 * (1 + np.tanh(0.5 * (w @ theta)))
        wt = prob * (1 - prob)
        return -np.einsum("i,ij,ik->ijk", wt, w, w)


MODELS = {
    "gaussian_location": "N(theta, I) location; data columns are the observation vector",
    "poisson_log_rate": "Poisson with rate exp(theta); one count column",
    "logit": "binary logit; first column outcome, remaining columns covariates",
}


def make_model(name: str, p: int) -> LikelihoodModel:
    """Instantiate a registry model for data with ``p`` columns."""
    if name == "gaussian_location":
        return GaussianLocation(p)
    if name == "poisson_log_rate":
        if p != 1:
            raise WrongConfig("poisson_log_rate takes exactly one data column")
        return PoissonLogRate()
    if name == "logit":
        if p < 2:
            raise WrongConfig("logit needs an outcome column and at least one covariate")
        return Logit(p - 1)
    raise WrongConfig(f"unknown model {name!r}; choose from {sorted(MODELS)}")


@dataclass(frozen=True, eq=False)
class MleSandwich:
    H_hat: np.ndarray
    Omega_hat: CovarianceEstimate
    V_hat: np.ndarray


@dataclass(frozen=True, eq=False)
class MleReport(EstimateReport):
    H_hat: np.ndarray
    Omega_hat: CovarianceEstimate
    loglik: float
    iterations: int
    grad_norm: float
    converged: bool
    termination: str

    @property
    def theta_hat(self) -> np.ndarray:
        return self.params


def mle_sandwich(sample: ClusteredSample, model: LikelihoodModel, theta) -> MleSandwich:
    """``H^-1 Omega H^-1`` at ``theta``.

    ``H`` is the average Hessian of the log density and ``Omega`` is the
    uncentered ``(1/n) sum_g s_g s_g'`` of cluster score sums.
    """
    theta = np.asarray(theta, dtype=np.float64)
    x = sample.data
    n = sample.n
    scores = model.score(x, theta)
    sums = np.add.reduceat(scores, sample.index.offsets, axis=0)
    omega = outer_sum(sums) / n
    H = symmetrize(model.hessian(x, theta).mean(axis=0))
    fac = pivoted_qr(H)
    if not fac.full_rank:
        raise SingularHessian(f"average Hessian has rank {fac.rank} < {H.shape[0]}")
    Hinv_omega = qr_lstsq(fac, omega)
    V = symmetrize(qr_lstsq(fac, Hinv_omega.T))
    return MleSandwich(H, CovarianceEstimate.build(omega, "score"), V)


def _ascent_direction(H: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Solve ``(-H + lam I) d = g`` with the smallest doubling ``lam >= 0``
    that makes ``-H + lam I`` positive definite."""
    A = -H
    try:
        c = sla.cho_factor(A)
        return sla.cho_solve(c, g)
    except np.linalg.LinAlgError:
        pass
    norm = np.linalg.norm(H, 2)
    lam = 1e-8 * norm if norm > 0 else 1e-8
    eye = np.eye(H.shape[0])
    while True:
        try:
            c = sla.cho_factor(A + lam * eye)
            return sla.cho_solve(c, g)
        except np.linalg.LinAlgError:
            lam *= 2.0


def fit_pseudo_mle(
    sample: ClusteredSample,
    model: LikelihoodModel,
    init,
    *,
    tol: float = 1e-8,
    max_iter: int = 200,
) -> MleReport:
    """Maximize the pooled log likelihood ``sum_i log f(x_i, theta)``.

    Newton ascent on the average log likelihood with Armijo backtracking.
    When the average Hessian is not negative definite the Newton system is
    shifted by ``lam * I`` (``lam`` starting at ``1e-8 ||H||`` and doubling).
    Iteration stops once ``||mean score|| <= tol`` or after ``max_iter``
    steps; in the latter case a :class:`NonConvergenceWarning` is emitted
    and the report has ``converged=False``. Trial points with a non-finite
    objective are rejected by the line search; a non-finite objective at
    ``init`` raises :class:`NonFiniteObjective`.
    """
    theta = np.array(init, dtype=np.float64).ravel()
    if theta.size != model.k or not np.all(np.isfinite(theta)):
        raise WrongConfig(f"init must be a finite vector of length {model.k}")
    x = sample.data
    lo, hi = (None, None) if model.bounds is None else map(np.asarray, model.bounds)

    def objective(t):
        return float(np.mean(model.log_density(x, t)))

    def project(t):
        return t if lo is None else np.clip(t, lo, hi)

    f = objective(theta)
    if not np.isfinite(f):
        raise NonFiniteObjective(theta, "log likelihood is not finite")
    termination = "max_iter"
    it = 0
    g = model.score(x, theta).mean(axis=0)
    while True:
        gnorm = float(np.linalg.norm(g))
        if gnorm <= tol:
            termination = "gradient"
            break
        if it >= max_iter:
            break
        H = symmetrize(model.hessian(x, theta).mean(axis=0))
        d = _ascent_direction(H, g)
        slope = float(g @ d)
        step = 1.0
        accepted = False
        for _ in range(60):
            cand = project(theta + step * d)
            fc = objective(cand)
            if np.isfinite(fc) and fc >= f + 1e-4 * step * slope:
                accepted = True
                break
            step *= 0.5
        if not accepted:
            # objective differences below rounding; accept if the gradient shrinks
            cand = project(theta + d)
            fc = objective(cand)
            gc = model.score(x, cand).mean(axis=0)
            if not (np.isfinite(fc) and np.linalg.norm(gc) < gnorm):
                termination = "line_search"
                break
        theta, f = cand, fc
        it += 1
        g = model.score(x, theta).mean(axis=0)

    converged = termination == "gradient"
    if not converged:
        warnings.warn(
            f"pseudo-MLE stopped ({termination}) with gradient norm {gnorm:.3g}",
            NonConvergenceWarning,
            stacklevel=2,
        )
    sw = mle_sandwich(sample, model, theta)
    return MleReport(
        params=theta,
        V_hat=sw.V_hat,
        n=sample.n,
        G=sample.G,
        H_hat=sw.H_hat,
        Omega_hat=sw.Omega_hat,
        loglik=f * sample.n,
        iterations=it,
        grad_norm=gnorm,
        converged=converged,
        termination=termination,
    )
