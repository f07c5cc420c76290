"""Monte Carlo experiments: convergence rates, coverage, J-test size and
second-moment normality.

Replication ``r`` at grid point ``i`` always draws from ``stream(seed, i, r)``
and results are merged in replication order, so aggregates are identical for
any number of worker threads.
"""

from __future__ import annotations

import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy import stats

from ..core import ClusteredSample, ClusterIndex, sample_mean
from ..crve import studentize_mean, vectorized_second_moments
from ..errors import EstimationError, SingularCovariance, WrongConfig
from ..gmm import LinearIV, WeightSpec, gmm_fit
from ..linalg import symmetric_inverse_sqrt
from ..linear import fit_ols, fit_tsls, LinearDesign, naive_ols_se
from .dgp import DgpSpec, check_dgp, generate, theoretical_cluster_variance
from .rng import stream

__all__ = [
    "McResult",
    "EstimatorConfig",
    "IvDgpConfig",
    "run_replications",
    "rate_experiment",
    "coverage_experiment",
    "jsize_experiment",
    "second_moment_clt_check",
    "draw_iv_sample",
    "moment_summary",
    "loglog_slope",
]


@dataclass
class McResult:
    """Per-replication records plus aggregates of one experiment.

    ``records`` maps column names to equal-length arrays (one entry per
    replication, or per grid point and replication). ``failures`` counts
    replications that raised an estimation error, keyed by error code.
    ``runtime`` is wall-clock seconds; it is left out of :meth:`to_dict` so
    serialized aggregates are reproducible.
    """

    experiment: str
    seed: int
    replications: int
    config: dict
    records: dict[str, np.ndarray]
    aggregates: dict
    failures: dict[str, int] = field(default_factory=dict)
    runtime: float = 0.0

    def to_dict(self, include_runtime: bool = False) -> dict:
        out = {
            "experiment": self.experiment,
            "seed": self.seed,
            "replications": self.replications,
            "config": self.config,
            "aggregates": self.aggregates,
            "failures": dict(sorted(self.failures.items())),
        }
        if include_runtime:
            out["runtime"] = self.runtime
        return out

    def write_csv(self, path) -> None:
        cols = list(self.records)
        arrays = [np.asarray(self.records[c]) for c in cols]
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(",".join(cols) + "\n")
            for row in zip(*arrays):
                fh.write(",".join(_fmt(v) for v in row) + "\n")


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return format(float(v), ".17g")


def run_replications(fn: Callable, keys, seed: int, threads: int = 1) -> list:
    """Evaluate ``fn(rng)`` for each key with its own stream, in key order.

    An :class:`EstimationError` raised by ``fn`` is captured and returned in
    place of the result.
    """
    keys = list(keys)

    def task(key):
        try:
            return fn(stream(seed, *key))
        except EstimationError as exc:
            return exc

    if threads <= 1:
        return [task(k) for k in keys]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(task, keys))


def _split_failures(results) -> tuple[list, Counter]:
    ok, bad = [], Counter()
    for r in results:
        if isinstance(r, EstimationError):
            bad[r.code] += 1
        else:
            ok.append(r)
    return ok, bad


def moment_summary(z) -> dict:
    """Mean, variance, skewness and excess kurtosis of a sample of draws."""
    z = np.asarray(z, dtype=np.float64).ravel()
    if z.size < 2:
        return {"count": int(z.size), "mean": float("nan"), "variance": float("nan"),
                "skewness": float("nan"), "excess_kurtosis": float("nan")}
    return {
        "count": int(z.size),
        "mean": float(np.mean(z)),
        "variance": float(np.var(z, ddof=1)),
        "skewness": float(stats.skew(z)),
        "excess_kurtosis": float(stats.kurtosis(z)),
    }


def loglog_slope(n, sd) -> tuple[float, float]:
    """OLS slope of ``log sd`` on ``log n`` and its conventional standard error."""
    x = np.log(np.asarray(n, dtype=np.float64))
    y = np.log(np.asarray(sd, dtype=np.float64))
    X = np.column_stack([np.ones_like(x), x])
    coef, *_ = np.linalg.lstsq(X, y, rcond=None)
    resid = y - X @ coef
    dof = len(x) - 2
    s2 = float(resid @ resid) / dof if dof > 0 else float("nan")
    xc = x - x.mean()
    return float(coef[1]), float(np.sqrt(s2 / (xc @ xc)))


# predicted log-log slope of sd(mean) in n; the inverse-distance family
# carries an extra log factor, so -1/2 is only its leading order
PREDICTED_SLOPE = {
    "independent": lambda a: -0.5,
    "equicorrelated_perfect": lambda a: -(1.0 - a) / 2.0,
    "inverse_distance": lambda a: -0.5,
    "random_walk": lambda a: a - 0.5,
    "two_size_mixture": lambda a: -(1.0 - a) / 2.0,
}


def theoretical_sd(dgp: DgpSpec) -> float:
    """``(1/n) sqrt(sum_g var(S_g))`` for the realized cluster layout."""
    sizes, _ = dgp.layout()
    ms, counts = np.unique(sizes, return_counts=True)
    total = sum(
        int(c) * theoretical_cluster_variance(dgp.family, int(m), dgp.lag_offset)
        for m, c in zip(ms, counts)
    )
    return float(np.sqrt(total) / sizes.sum())


def rate_experiment(
    family: str,
    alpha: float,
    n_grid,
    reps: int,
    seed: int,
    *,
    lag_offset: float = 0.0,
    threads: int = 1,
) -> McResult:
    """Empirical standard deviation of the sample mean across a grid of ``n``.

    For each target ``n`` the sample mean is drawn ``reps`` times; its
    standard deviation is compared with the exact value and
    ``log sd`` is regressed on ``log n`` (realized sizes) to estimate the
    convergence rate.
    """
    n_grid = [int(v) for v in n_grid]
    if len(n_grid) < 4:
        raise WrongConfig("n_grid needs at least 4 points")
    if any(b <= a for a, b in zip(n_grid, n_grid[1:])):
        raise WrongConfig("n_grid must be strictly increasing")
    if reps < 500:
        raise WrongConfig("rate experiments need reps >= 500")
    t0 = time.perf_counter()
    specs = [DgpSpec(family, alpha=alpha, n=n, lag_offset=lag_offset) for n in n_grid]
    for spec in specs:
        check_dgp(spec)

    def one(spec):
        return lambda rng: float(sample_mean(generate(spec, rng))[0])

    grid, rep_col, n_col, means = [], [], [], []
    points, failures = [], Counter()
    for i, spec in enumerate(specs):
        res = run_replications(one(spec), [(i, r) for r in range(reps)], seed, threads)
        ok, bad = _split_failures(res)
        failures += bad
        sizes, truncated = spec.layout()
        n_real = int(sizes.sum())
        x = np.asarray(ok)
        sd = float(np.std(x, ddof=1))
        sd_theory = theoretical_sd(spec)
        mc_se = sd / np.sqrt(2.0 * (len(x) - 1))
        points.append({
            "n_target": spec.n,
            "n": n_real,
            "G": int(sizes.size),
            "max_cluster_size": int(sizes.max()),
            "last_cluster_truncated": bool(truncated),
            "empirical_sd": sd,
            "theoretical_sd": sd_theory,
            "mc_se_sd": float(mc_se),
            "z_sd": float((sd - sd_theory) / mc_se),
        })
        grid += [i] * reps
        rep_col += list(range(reps))
        n_col += [n_real] * reps
        means += [r if not isinstance(r, EstimationError) else np.nan for r in res]

    ns = [pt["n"] for pt in points]
    slope, slope_se = loglog_slope(ns, [pt["empirical_sd"] for pt in points])
    theory_slope, _ = loglog_slope(ns, [pt["theoretical_sd"] for pt in points])
    predicted = PREDICTED_SLOPE[family](alpha)
    aggregates = {
        "grid": points,
        "slope": slope,
        "slope_se": slope_se,
        "predicted_slope": predicted,
        "theoretical_slope": theory_slope,
        "z_predicted": (slope - predicted) / slope_se,
        "z_theoretical": (slope - theory_slope) / slope_se,
        "within_2se_predicted": bool(abs(slope - predicted) <= 2 * slope_se),
        "within_2se_theoretical": bool(abs(slope - theory_slope) <= 2 * slope_se),
    }
    config = {"family": family, "alpha": alpha, "n_grid": n_grid, "reps": reps,
              "lag_offset": lag_offset}
    return McResult(
        "rate", int(seed), reps, config,
        {"grid_index": np.array(grid), "rep": np.array(rep_col), "n": np.array(n_col),
         "mean": np.array(means)},
        aggregates, dict(failures), time.perf_counter() - t0,
    )


@dataclass(frozen=True)
class EstimatorConfig:
    """What a coverage experiment studentizes.

    ``ols_intercept`` regresses the first column on a constant with the
    chosen dof adjustment and also records the naive i.i.d. interval;
    ``studentized_mean`` uses the common-mean CRVE directly.
    """

    kind: str = "ols_intercept"
    dof: str = "stata"
    truth: float = 0.0

    def __post_init__(self):
        if self.kind not in ("ols_intercept", "studentized_mean"):
            raise WrongConfig(f"unknown estimator kind {self.kind!r}")


def coverage_experiment(
    estimator_config: EstimatorConfig,
    dgp: DgpSpec,
    reps: int,
    seed: int,
    level: float = 0.95,
    *,
    threads: int = 1,
) -> McResult:
    """Coverage of normal-theory intervals built from cluster-robust se."""
    if reps < 1000:
        raise WrongConfig("coverage experiments need reps >= 1000")
    if not 0.0 < level < 1.0:
        raise WrongConfig("level must lie in (0, 1)")
    check_dgp(dgp)
    t0 = time.perf_counter()
    cfg = estimator_config
    crit = float(stats.norm.ppf(0.5 + level / 2.0))

    def one(rng):
        sample = generate(dgp, rng)
        if cfg.kind == "studentized_mean":
            t = float(studentize_mean(sample, cfg.truth)[0])
            return float(sample_mean(sample)[0]), t, np.nan, np.nan
        y = sample.data[:, 0]
        X = np.ones((sample.n, 1))
        rep = fit_ols(y, X, sample.index, cfg.dof)
        b = float(rep.params[0])
        t = (b - cfg.truth) / float(rep.se[0])
        t_naive = (b - cfg.truth) / float(naive_ols_se(rep, X)[0])
        return b, t, float(rep.se[0]), t_naive

    res = run_replications(one, [(0, r) for r in range(reps)], seed, threads)
    ok, bad = _split_failures(res)
    arr = np.array(ok, dtype=np.float64).reshape(-1, 4)
    t = arr[:, 1]
    cover = np.abs(t) <= crit
    aggregates = {
        "level": level,
        "critical_value": crit,
        "completed": int(arr.shape[0]),
        "coverage": float(cover.mean()) if cover.size else float("nan"),
        "coverage_mc_se": float(np.sqrt(level * (1 - level) / max(cover.size, 1))),
        "studentized": moment_summary(t),
    }
    records = {
        "rep": np.array([r for r, v in enumerate(res) if not isinstance(v, EstimationError)]),
        "estimate": arr[:, 0],
        "t": t,
        "covered": cover,
    }
    if cfg.kind == "ols_intercept":
        naive_cover = np.abs(arr[:, 3]) <= crit
        aggregates["naive_coverage"] = float(naive_cover.mean()) if naive_cover.size else float("nan")
        records["se"] = arr[:, 2]
        records["naive_covered"] = naive_cover
    config = {"estimator": {"kind": cfg.kind, "dof": cfg.dof, "truth": cfg.truth},
              "dgp": _dgp_dict(dgp), "reps": reps, "level": level}
    return McResult("coverage", int(seed), reps, config, records, aggregates,
                    dict(bad), time.perf_counter() - t0)


def _dgp_dict(dgp: DgpSpec) -> dict:
    return {k: getattr(dgp, k) for k in
            ("family", "alpha", "n", "clusters", "cluster_size", "p", "lag_offset")}


@dataclass(frozen=True)
class IvDgpConfig:
    """Linear IV design with cluster random effects in instruments and errors.

    ``y = x b + u`` with one endogenous regressor ``x = z'pi + v`` and
    ``instruments`` excluded instruments (no constant). Each instrument and
    the structural error have intraclass correlation ``rho``; ``v`` loads on
    ``u`` with coefficient ``endogeneity``.
    """

    clusters: int = 300
    cluster_size: int = 10
    instruments: int = 2
    regressors: int = 1
    rho: float = 0.5
    endogeneity: float = 0.5
    first_stage: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.regressors != 1:
            raise WrongConfig("the IV design has a single endogenous regressor")
        if self.instruments <= self.regressors:
            raise WrongConfig(
                f"J test needs l > k; got l={self.instruments}, k={self.regressors}"
            )
        if self.clusters < 2 or self.cluster_size < 1:
            raise WrongConfig("need at least two clusters of positive size")
        if not 0.0 <= self.rho <= 1.0:
            raise WrongConfig("rho must lie in [0, 1]")

    @property
    def overid(self) -> int:
        return self.instruments - self.regressors


def draw_iv_sample(cfg: IvDgpConfig, rng: np.random.Generator) -> ClusteredSample:
    """Columns ``[y, x, z_1, ..., z_l]`` of one clustered IV sample."""
    G, m, l = cfg.clusters, cfg.cluster_size, cfg.instruments
    n = G * m
    a, b = np.sqrt(cfg.rho), np.sqrt(1.0 - cfg.rho)

    def clustered(cols):
        common = np.repeat(rng.standard_normal((G, cols)), m, axis=0)
        return a * common + b * rng.standard_normal((n, cols))

    z = clustered(l)
    u = clustered(1)[:, 0]
    v = cfg.endogeneity * u + np.sqrt(1 - cfg.endogeneity**2) * rng.standard_normal(n)
    x = cfg.first_stage * z.sum(axis=1) / np.sqrt(l) + v
    y = cfg.beta * x + u
    return ClusteredSample(np.column_stack([y, x, z]), ClusterIndex.from_sizes([m] * G))


def jsize_experiment(
    iv_dgp_config: IvDgpConfig,
    reps: int,
    seed: int,
    *,
    size: float = 0.05,
    threads: int = 1,
) -> McResult:
    """Rejection rate of the J test under a correctly specified IV model.

    Each replication fits two-step GMM twice on the same draw: with the
    clustered centered weight and, as a control, with the conventional
    centered weight that ignores clustering.
    """
    cfg = iv_dgp_config
    if cfg.overid < 1:
        raise WrongConfig("J test needs an overidentified design")
    t0 = time.perf_counter()
    df = cfg.overid
    crit = float(stats.chi2.ppf(1 - size, df))
    xcols, zcols = [1], list(range(2, 2 + cfg.instruments))
    model = LinearIV(0, xcols, zcols)
    arms = {"clustered": WeightSpec("clustered", True), "conventional": WeightSpec("conventional", True)}

    def one(rng):
        s = draw_iv_sample(cfg, rng)
        init = fit_tsls(LinearDesign.from_sample(s, 0, xcols, zcols), "none").params
        # J is the final criterion n mbar' W^-1 mbar under each arm's weight
        return tuple(gmm_fit(s, model, init, weight=w).J_statistic for w in arms.values())

    res = run_replications(one, [(0, r) for r in range(reps)], seed, threads)
    ok, bad = _split_failures(res)
    J = np.array(ok, dtype=np.float64).reshape(-1, len(arms))
    probs = (0.5, 0.9, 0.95, 0.99)
    aggregates = {"df": df, "size": size, "critical_value": crit, "completed": int(J.shape[0])}
    for j, name in enumerate(arms):
        col = J[:, j]
        aggregates[name] = {
            "rejection_rate": float(np.mean(col > crit)) if col.size else float("nan"),
            "qq": [
                {"prob": q, "empirical": float(np.quantile(col, q)),
                 "chi2": float(stats.chi2.ppf(q, df))}
                for q in probs
            ] if col.size else [],
        }
    records = {"rep": np.array([r for r, v in enumerate(res) if not isinstance(v, EstimationError)])}
    for j, name in enumerate(arms):
        records[f"J_{name}"] = J[:, j]
    config = {"iv_dgp": {k: getattr(cfg, k) for k in
                         ("clusters", "cluster_size", "instruments", "regressors", "rho",
                          "endogeneity", "first_stage", "beta")},
              "reps": reps, "size": size}
    return McResult("jsize", int(seed), reps, config, records, aggregates,
                    dict(bad), time.perf_counter() - t0)


def expected_second_moment(dgp: DgpSpec, centered: bool = False) -> np.ndarray:
    """Exact ``E fbar`` for a DGP (length ``p**2``, coordinates independent).

    Uncentered: ``(1/n) sum_g var(S_g)`` on the diagonal. Centered, when cluster
    sums are centered at ``n_g xbar``: each diagonal entry becomes
    ``(1/n) [sum_g v_g (1 - 2 n_g/n) + (sum_g n_g^2 / n^2) sum_g v_g]``.
    """
    sizes, _ = dgp.layout()
    v = np.array([theoretical_cluster_variance(dgp.family, int(m), dgp.lag_offset) for m in sizes])
    w = sizes.astype(np.float64)
    n = w.sum()
    if centered:
        total = float(np.sum(v * (1 - 2 * w / n)) + np.sum(w**2) / n**2 * v.sum())
    else:
        total = float(v.sum())
    return (np.eye(dgp.p) * total / n).ravel()


def second_moment_clt_check(
    dgp: DgpSpec | Callable[[np.random.Generator], ClusteredSample],
    reps: int,
    seed: int,
    *,
    centered: bool = False,
    expected=None,
    threads: int = 1,
) -> McResult:
    """Studentized clustered second moments ``Omega^{-1/2} sqrt(n) (fbar - E fbar)``.

    ``dgp`` is a :class:`DgpSpec` (expected value computed exactly) or a
    callable drawing a sample from a generator, in which case ``expected``
    must be given. Only ``p = 1`` is supported since the Kronecker vector
    has repeated coordinates otherwise.
    """
    if isinstance(dgp, DgpSpec):
        if dgp.p != 1:
            raise WrongConfig("second-moment check supports p = 1 only")
        check_dgp(dgp)
        mu = expected_second_moment(dgp, centered) if expected is None else np.atleast_1d(expected)
        draw = lambda rng: generate(dgp, rng)  # noqa: E731
        dgp_cfg = _dgp_dict(dgp)
    else:
        if expected is None:
            raise WrongConfig("give the expected second moment for a custom generator")
        mu = np.atleast_1d(np.asarray(expected, dtype=np.float64))
        draw = dgp
        dgp_cfg = {"custom": getattr(dgp, "__name__", "callable")}
    t0 = time.perf_counter()

    def one(rng):
        s = draw(rng)
        fbar, cov = vectorized_second_moments(s, centered)
        root = symmetric_inverse_sqrt(cov.matrix)
        if root.rank == 0:
            raise SingularCovariance("second-moment covariance is zero")
        return float((root.matrix @ (np.sqrt(s.n) * (fbar - mu)))[0])

    res = run_replications(one, [(0, r) for r in range(reps)], seed, threads)
    ok, bad = _split_failures(res)
    z = np.array(ok, dtype=np.float64)
    aggregates = {"expected": [float(v) for v in mu], "completed": int(z.size),
                  "studentized": moment_summary(z)}
    records = {"rep": np.array([r for r, v in enumerate(res) if not isinstance(v, EstimationError)]),
               "z": z}
    config = {"dgp": dgp_cfg, "reps": reps, "centered": centered}
    return McResult("clt2", int(seed), reps, config, records, aggregates,
                    dict(bad), time.perf_counter() - t0)
