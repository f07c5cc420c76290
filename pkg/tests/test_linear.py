import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from numpy.testing import assert_allclose

from clusterrobust import (
    ClusterIndex,
    DofAdjustment,
    LinearDesign,
    fit_ols,
    fit_tsls,
    standard_errors,
    wald_test,
)
from clusterrobust.errors import (
    ConditionNumberWarning,
    RankDeficientDesign,
    RankDeficientRestriction,
    SingularInstrumentMoment,
    WrongConfig,
)
from clusterrobust.linear import naive_ols_se

from conftest import rel_err, sizes_st


def random_design(seed, sizes, k=2, l=None, scale=1.0):
    gen = np.random.default_rng(seed)
    idx = ClusterIndex.from_sizes(sizes)
    n = idx.n
    l = k if l is None else l
    Z = np.column_stack([np.ones(n), gen.normal(size=(n, l - 1))])
    u = np.repeat(gen.normal(size=idx.G), sizes) + gen.normal(size=n)
    X = Z[:, :k] + (0.5 * Z[:, k:].sum(axis=1, keepdims=True) if l > k else 0.0)
    X = X + 0.3 * gen.normal(size=(n, k)) * (np.arange(k) > 0)
    y = X @ np.linspace(1.0, -1.0, k) + u
    return LinearDesign(scale * y, X, Z, idx)


@pytest.fixture
def intercept_design():
    return np.array([1.0, 2.0, 3.0, 4.0]), np.ones((4, 1)), ClusterIndex.from_sizes([2, 2])


def test_intercept_hand_example(intercept_design):
    y, X, idx = intercept_design
    r = fit_ols(y, X, idx, "none")
    assert_allclose(r.beta_hat, [2.5], rtol=1e-12)
    assert_allclose(r.Omega_hat.matrix, [[2.0]], rtol=1e-12)
    assert_allclose(r.V_hat, [[2.0]], rtol=1e-12)
    assert_allclose(r.se, [np.sqrt(0.5)], rtol=1e-12)
    assert_allclose(r.residuals, [-1.5, -0.5, 0.5, 1.5], rtol=1e-12)
    rs = fit_ols(y, X, idx, "stata")
    assert rs.d_n == pytest.approx(2.0, rel=1e-15)
    assert_allclose(rs.se, [1.0], rtol=1e-12)
    w = wald_test(r, np.eye(1))
    assert w.statistic == pytest.approx(12.5, rel=1e-12)
    assert w.statistic == pytest.approx(r.t_ratios[0] ** 2, rel=1e-12)
    assert w.df == 1
    assert_allclose(standard_errors(r, np.eye(1)), [np.sqrt(0.5)], rtol=1e-12)


def test_wald_null_at_estimate(intercept_design):
    y, X, idx = intercept_design
    r = fit_ols(y, X, idx, "none")
    w = wald_test(r, [1.0], r.params)
    assert w.statistic == pytest.approx(0.0, abs=1e-20)
    assert w.p_value == pytest.approx(1.0)


def test_exact_fit_gives_zero_se():
    idx = ClusterIndex.from_sizes([3, 3])
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    r = fit_ols(X @ [1.0, 2.0], X, idx, "none")
    assert_allclose(r.params, [1.0, 2.0], rtol=1e-12)
    assert_allclose(r.se, 0.0, atol=1e-7)


@pytest.mark.parametrize("mode,expected", [("none", 1.0), ("hansen", 10 / 9),
                                           ("stata", 99 / 97 * 10 / 9)])
def test_dof_values(mode, expected):
    assert DofAdjustment(mode).value(100, 3, 10) == pytest.approx(expected, rel=1e-15)


def test_dof_bad_mode():
    with pytest.raises(WrongConfig):
        DofAdjustment("hc1")


def test_ols_is_tsls_with_z_equal_x():
    d = random_design(1, [3, 4, 2, 5, 3], k=3)
    a = fit_tsls(LinearDesign(d.y, d.X, d.X, d.index))
    b = fit_ols(d.y, d.X, d.index)
    assert_allclose(a.params, b.params, rtol=0, atol=0)
    assert_allclose(a.V_hat, b.V_hat, rtol=0, atol=0)


def test_just_identified_closed_form():
    d = random_design(2, [4] * 10, k=2, l=2)
    Z = d.Z.copy()
    Z[:, 1] += np.random.default_rng(0).normal(size=d.n)
    d = LinearDesign(d.y, d.X, Z, d.index)
    r = fit_tsls(d)
    assert_allclose(r.params, np.linalg.solve(Z.T @ d.X, Z.T @ d.y), rtol=1e-10)


def test_single_instrument_hand_solution():
    # beta = sum(z y) / sum(z x) = (1*2 + 2*1 + 3*5) / (1*1 + 2*3 + 3*2) = 19 / 13
    y = np.array([2.0, 1.0, 5.0])
    x = np.array([[1.0], [3.0], [2.0]])
    z = np.array([[1.0], [2.0], [3.0]])
    r = fit_tsls(LinearDesign(y, x, z, ClusterIndex.from_sizes([1, 2])), "none")
    assert_allclose(r.params, [19 / 13], rtol=1e-14)


def test_overidentified_matches_textbook_formula():
    d = random_design(3, [5] * 20, k=2, l=4)
    r = fit_tsls(d, "hansen")
    X, Z, y, n = d.X, d.Z, d.y, d.n
    P = Z @ np.linalg.solve(Z.T @ Z, Z.T)
    beta = np.linalg.solve(X.T @ P @ X, X.T @ P @ y)
    assert_allclose(r.params, beta, rtol=1e-10)
    Q, W = Z.T @ X / n, Z.T @ Z / n
    e = y - X @ beta
    om = sum(np.outer(Z[s].T @ e[s], Z[s].T @ e[s]) for s in d.index.blocks()) / n
    Wi = np.linalg.inv(W)
    B = np.linalg.inv(Q.T @ Wi @ Q)
    V = d.index.G / (d.index.G - 1) * B @ Q.T @ Wi @ om @ Wi @ Q @ B
    assert rel_err(r.V_hat, V) <= 1e-9
    assert rel_err(r.Omega_hat.matrix, om) <= 1e-10


def run_hc0_check(seed):
    """Singleton clusters: meat equals (1/n) sum z_i e_i^2 z_i'."""
    gen = np.random.default_rng(seed)
    n = int(gen.integers(10, 60))
    k = int(gen.integers(1, 5))
    X = np.column_stack([np.ones(n), gen.normal(size=(n, k - 1))])
    y = X @ gen.normal(size=k) + gen.normal(size=n) * (1 + np.abs(X[:, -1]))
    r = fit_ols(y, X, ClusterIndex.from_sizes([1] * n), "none")
    e = r.residuals
    hc0 = (X * e[:, None] ** 2).T @ X / n
    return rel_err(r.Omega_hat.matrix, hc0)


@given(st.integers(0, 2**32 - 1))
def test_singleton_reduces_to_hc0(seed):
    assert run_hc0_check(seed) <= 1e-12


@given(st.integers(0, 2**32 - 1), sizes_st, st.floats(0.1, 50), st.booleans())
def test_scale_equivariance(seed, sizes, c, neg):
    c = -c if neg else c
    d = random_design(seed, sizes + [3, 3], k=2)
    r = fit_ols(d.y, d.X, d.index)
    ry = fit_ols(c * d.y, d.X, d.index)
    assert_allclose(ry.params, c * r.params, rtol=1e-9, atol=1e-12)
    assert_allclose(ry.se, abs(c) * r.se, rtol=1e-8, atol=1e-12)
    Xs = d.X * np.array([1.0, c])
    rx = fit_ols(d.y, Xs, d.index)
    assert_allclose(rx.params, r.params / np.array([1.0, c]), rtol=1e-9, atol=1e-12)
    assert_allclose(rx.t_ratios, r.t_ratios * np.array([1.0, np.sign(c)]), rtol=1e-7, atol=1e-9)


@given(st.integers(0, 2**32 - 1), st.integers(0, 2**32 - 1))
def test_wald_reparametrization_invariance(seed, seed_a):
    d = random_design(seed, [4] * 12, k=3)
    r = fit_ols(d.y, d.X, d.index)
    gen = np.random.default_rng(seed_a)
    R = gen.normal(size=(3, 2))
    r0 = gen.normal(size=2)
    A = gen.normal(size=(2, 2)) + 3 * np.eye(2)
    w1 = wald_test(r, R, r0)
    w2 = wald_test(r, R @ A, A.T @ r0)
    assert w2.statistic == pytest.approx(w1.statistic, rel=1e-8, abs=1e-10)


@given(st.integers(0, 2**32 - 1), st.randoms(use_true_random=False))
def test_cluster_permutation_invariance(seed, rnd):
    sizes = [2, 5, 3, 1, 4, 3]
    d = random_design(seed, sizes, k=2, l=3)
    order = list(range(len(sizes)))
    rnd.shuffle(order)
    blocks = list(d.index.blocks())
    rows = np.concatenate([np.arange(blocks[g].start, blocks[g].stop) for g in order])
    idx = ClusterIndex.from_sizes([sizes[g] for g in order])
    a = fit_tsls(d)
    b = fit_tsls(LinearDesign(d.y[rows], d.X[rows], d.Z[rows], idx))
    assert_allclose(b.params, a.params, rtol=1e-10)
    assert_allclose(b.V_hat, a.V_hat, rtol=1e-9, atol=1e-12)
    assert_allclose(b.Omega_hat.matrix, a.Omega_hat.matrix, rtol=1e-9, atol=1e-12)


def test_rank_errors():
    idx = ClusterIndex.from_sizes([3, 3])
    X = np.column_stack([np.ones(6), np.arange(6.0)])
    with pytest.raises(SingularInstrumentMoment):
        fit_tsls(LinearDesign(np.arange(6.0), X, np.column_stack([X, 2 * X[:, 1]]), idx))
    with pytest.raises(RankDeficientDesign):
        fit_ols(np.arange(6.0), np.column_stack([X, X[:, 1]]), idx)
    with pytest.raises(RankDeficientDesign):
        fit_tsls(LinearDesign(np.arange(6.0), np.column_stack([X, X[:, 1]]),
                              np.column_stack([X, np.arange(6.0) ** 2]), idx))
    Z = np.column_stack([np.ones(6), np.arange(6.0) ** 2])
    with pytest.raises(WrongConfig):
        LinearDesign(np.arange(6.0), np.column_stack([X, X]), Z, idx)


def test_condition_warning():
    idx = ClusterIndex.from_sizes([5] * 4)
    t = np.arange(20.0)
    X = np.column_stack([np.ones(20), t, t + 1e-7 * np.cos(t)])
    with pytest.warns(ConditionNumberWarning):
        fit_ols(t**2, X, idx)


def test_wald_restriction_errors(intercept_design):
    y, X, idx = intercept_design
    r = fit_ols(y, X, idx, "none")
    with pytest.raises(RankDeficientRestriction):
        wald_test(r, np.ones((2, 1)))
    with pytest.raises(RankDeficientRestriction):
        wald_test(r, np.zeros((1, 1)))


def test_naive_se_ignores_clusters(intercept_design):
    y, X, idx = intercept_design
    r = fit_ols(y, X, idx, "none")
    # s^2 = 5 / 3, se = sqrt(s^2 / 4)
    assert_allclose(naive_ols_se(r, X), [np.sqrt(5 / 12)], rtol=1e-12)
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        fit_ols(y, X, idx, "stata")
