import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from clusterrobust import (
    ClusteredSample,
    ClusterIndex,
    crve_common_mean,
    fit_pseudo_mle,
    make_model,
    mle_sandwich,
    sample_mean,
)
from clusterrobust.errors import (
    NonConvergenceWarning,
    NonFiniteObjective,
    SingularHessian,
    WrongConfig,
)
from clusterrobust.mle import CallableLikelihood, GaussianLocation, Logit, PoissonLogRate

from conftest import clustered_samples, rel_err


def centered_score_crve(s):
    xbar = s.data.mean(axis=0)
    acc = np.zeros((s.p, s.p))
    for g in range(s.G):
        d = (s.cluster(g) - xbar).sum(axis=0)
        acc += np.outer(d, d)
    return acc / s.n


@given(clustered_samples(), st.lists(st.floats(-50, 50), min_size=3, max_size=3))
def test_gaussian_location_one_newton_step(s, init):
    rep = fit_pseudo_mle(s, GaussianLocation(s.p), init[: s.p])
    assert rep.converged and rep.iterations == 1
    assert_allclose(rep.theta_hat, sample_mean(s), rtol=1e-12, atol=1e-12)
    assert rep.grad_norm <= 1e-8


@given(clustered_samples(equal=True))
def test_gaussian_sandwich_equals_common_mean_crve(s):
    rep = fit_pseudo_mle(s, GaussianLocation(s.p), np.zeros(s.p))
    assert rel_err(rep.V_hat, crve_common_mean(s).matrix) <= 1e-8


@given(clustered_samples())
def test_gaussian_sandwich_equals_centered_form(s):
    # with unequal sizes the uncentered score form is the centered CRVE
    rep = fit_pseudo_mle(s, GaussianLocation(s.p), np.zeros(s.p))
    assert rel_err(rep.V_hat, centered_score_crve(s)) <= 1e-8


def test_gaussian_hessian_at_mean(hand_sample):
    sw = mle_sandwich(hand_sample, GaussianLocation(1), sample_mean(hand_sample))
    assert_allclose(sw.H_hat, [[-1.0]], rtol=0, atol=0)
    assert_allclose(sw.V_hat, [[2.0]], rtol=1e-12)


def test_poisson_closed_form(rng):
    y = rng.poisson(3.0, size=200).astype(float)
    s = ClusteredSample(y, ClusterIndex.from_sizes([4] * 50))
    rep = fit_pseudo_mle(s, PoissonLogRate(), [0.0])
    assert rep.converged
    # |mean score| <= 1e-8 bounds the error by 1e-8 / exp(theta)
    assert_allclose(rep.theta_hat, [np.log(y.mean())], rtol=0, atol=1e-8 / y.mean())


def test_information_equality_singletons():
    gen = np.random.default_rng(7)
    n = 10_000
    y = gen.poisson(2.0, size=n).astype(float)
    s = ClusteredSample(y, ClusterIndex.from_sizes([1] * n))
    sw = mle_sandwich(s, PoissonLogRate(), [np.log(2.0)])
    assert sw.Omega_hat.matrix[0, 0] == pytest.approx(-sw.H_hat[0, 0], rel=0.05)


def test_k1_brute_force_sandwich():
    y = np.array([0.0, 1.0, 3.0, 2.0, 0.0, 5.0])
    sizes = [2, 3, 1]
    s = ClusteredSample(y, ClusterIndex.from_sizes(sizes))
    theta = 0.4
    lam = np.exp(theta)
    H = 0.0
    om = 0.0
    pos = 0
    for m in sizes:
        sg = 0.0
        for j in range(m):
            sg += y[pos + j] - lam
            H -= lam
        om += sg * sg
        pos += m
    H /= 6
    om /= 6
    sw = mle_sandwich(s, PoissonLogRate(), [theta])
    assert_allclose(sw.H_hat, [[H]], rtol=1e-14)
    assert_allclose(sw.Omega_hat.matrix, [[om]], rtol=1e-14)
    assert_allclose(sw.V_hat, [[om / H**2]], rtol=1e-13)


def logit_sample(seed, n_clusters=40, m=5, k=3):
    gen = np.random.default_rng(seed)
    n = n_clusters * m
    W = np.column_stack([np.ones(n), gen.normal(size=(n, k - 1))])
    eff = np.repeat(gen.normal(size=n_clusters), m)
    y = (W @ np.linspace(0.5, -0.5, k) + eff + gen.logistic(size=n) > 0).astype(float)
    return ClusteredSample(np.column_stack([y, W]), ClusterIndex.from_sizes([m] * n_clusters))


def test_logit_converges_and_score_vanishes():
    s = logit_sample(3)
    model = Logit(3)
    rep = fit_pseudo_mle(s, model, np.zeros(3))
    assert rep.converged
    assert np.linalg.norm(model.score(s.data, rep.theta_hat).mean(axis=0)) <= 1e-8
    # centered and uncentered score covariances agree at the estimate
    sc = model.score(s.data, rep.theta_hat)
    sc = sc - sc.mean(axis=0)
    sums = np.add.reduceat(sc, s.index.offsets, axis=0)
    assert rel_err(rep.Omega_hat.matrix, sums.T @ sums / s.n) <= 1e-6


@given(st.integers(0, 2**32 - 1))
def test_score_and_hessian_match_finite_differences(seed):
    gen = np.random.default_rng(seed)
    k = int(gen.integers(1, 4))
    x_logit = np.column_stack([gen.integers(0, 2, size=20), gen.normal(size=(20, k))])
    theta = gen.normal(size=k)
    es, eh = Logit(k).check_derivatives(x_logit, theta)
    assert es <= 1e-4 and eh <= 1e-4
    x_pois = gen.poisson(3.0, size=(20, 1)).astype(float)
    es, eh = PoissonLogRate().check_derivatives(x_pois, gen.normal(size=1))
    assert es <= 1e-4 and eh <= 1e-4
    x_g = gen.normal(size=(20, k))
    es, eh = GaussianLocation(k).check_derivatives(x_g, theta)
    assert es <= 1e-4 and eh <= 1e-4


def test_finite_difference_fallbacks_match_analytic(rng):
    x = rng.normal(size=(30, 2))
    theta = np.array([0.3, -0.7])
    gauss = GaussianLocation(2)
    fd = CallableLikelihood(gauss.log_density, k=2)
    assert_allclose(fd.score(x, theta), gauss.score(x, theta), rtol=1e-6, atol=1e-6)
    assert_allclose(fd.hessian(x, theta), gauss.hessian(x, theta), atol=1e-4)
    h_from_score = CallableLikelihood(gauss.log_density, k=2, score_fn=gauss.score)
    assert_allclose(h_from_score.hessian(x, theta), gauss.hessian(x, theta), atol=1e-8)


@given(st.integers(0, 2**32 - 1))
def test_affine_reparametrization(seed):
    gen = np.random.default_rng(seed)
    s = ClusteredSample(gen.normal(size=(24, 2)), ClusterIndex.from_sizes([3] * 8))
    A = gen.normal(size=(2, 2)) + 2.5 * np.eye(2)
    b = gen.normal(size=2)
    base = GaussianLocation(2)
    rep = fit_pseudo_mle(s, base, np.zeros(2))
    reparam = CallableLikelihood(
        lambda x, phi: base.log_density(x, A @ phi + b),
        k=2,
        score_fn=lambda x, phi: base.score(x, A @ phi + b) @ A,
        hessian_fn=lambda x, phi: np.einsum("ji,njk,kl->nil", A, base.hessian(x, A @ phi + b), A),
    )
    rp = fit_pseudo_mle(s, reparam, np.zeros(2))
    assert_allclose(A @ rp.theta_hat + b, rep.theta_hat, rtol=1e-9, atol=1e-9)
    assert_allclose(A @ rp.V_hat @ A.T, rep.V_hat, rtol=1e-7, atol=1e-10)
    assert rp.loglik == pytest.approx(rep.loglik, rel=1e-12)


def test_ridge_fallback_on_nonconcave_start():
    x = np.zeros((4, 1))
    model = CallableLikelihood(
        lambda x, t: np.full(x.shape[0], -((t[0] ** 2 - 1.0) ** 2)),
        k=1,
        score_fn=lambda x, t: np.full((x.shape[0], 1), -4 * t[0] * (t[0] ** 2 - 1.0)),
        hessian_fn=lambda x, t: np.full((x.shape[0], 1, 1), -(12 * t[0] ** 2 - 4.0)),
    )
    rep = fit_pseudo_mle(ClusteredSample(x, ClusterIndex.from_sizes([2, 2])), model, [0.1])
    assert rep.converged
    assert abs(rep.theta_hat[0]) == pytest.approx(1.0, abs=1e-8)


def test_nonconvergence_flagged():
    s = logit_sample(5)
    with pytest.warns(NonConvergenceWarning):
        rep = fit_pseudo_mle(s, Logit(3), np.zeros(3), max_iter=1)
    assert not rep.converged and rep.termination == "max_iter"


def test_nonfinite_objective_at_init():
    s = ClusteredSample(np.array([0.0, 1.0, 2.0]), ClusterIndex.from_sizes([1, 2]))
    with pytest.raises(WrongConfig):
        fit_pseudo_mle(s, PoissonLogRate(), [np.inf])
    s2 = ClusteredSample(np.array([-1.0, 1.0]), ClusterIndex.from_sizes([1, 1]))
    def log_density(x, t):
        with np.errstate(invalid="ignore"):
            return np.log(x[:, 0] * t[0])

    model = CallableLikelihood(log_density, k=1)
    with pytest.raises(NonFiniteObjective) as info:
        fit_pseudo_mle(s2, model, [1.0])
    assert_allclose(info.value.theta, [1.0])


def test_singular_hessian():
    s = ClusteredSample(np.arange(4.0), ClusterIndex.from_sizes([2, 2]))
    model = CallableLikelihood(lambda x, t: -0.5 * (x[:, 0] - t[0]) ** 2, k=2)
    with pytest.raises(SingularHessian):
        mle_sandwich(s, model, [1.0, 0.0])


def test_bounds_are_respected():
    y = np.array([5.0, 6.0, 7.0, 8.0])
    s = ClusteredSample(y, ClusterIndex.from_sizes([2, 2]))
    base = GaussianLocation(1)
    model = CallableLikelihood(base.log_density, k=1, score_fn=base.score,
                               hessian_fn=base.hessian, bounds=([0.0], [3.0]))
    with pytest.warns(NonConvergenceWarning):
        rep = fit_pseudo_mle(s, model, [1.0])
    assert rep.theta_hat[0] == pytest.approx(3.0)


def test_registry():
    assert isinstance(make_model("gaussian_location", 2), GaussianLocation)
    assert isinstance(make_model("logit", 4), Logit) and make_model("logit", 4).k == 3
    with pytest.raises(WrongConfig):
        make_model("probit", 2)
    with pytest.raises(WrongConfig):
        make_model("poisson_log_rate", 2)
