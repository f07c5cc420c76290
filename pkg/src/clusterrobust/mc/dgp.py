"""Clustered data-generating families with closed-form cluster variances.

Every family uses Gaussian innovations with unit marginal variance:

``independent``
    i.i.d. N(0, 1) within and across clusters.
``equicorrelated_perfect``
    one N(0, 1) draw per cluster, repeated ``n_g`` times.
``inverse_distance``
    within-cluster covariance ``1 / (lag_offset + |j - l|)`` off the diagonal.
``random_walk``
    cumulative sums of i.i.d. N(0, 1) starting from zero.
``two_size_mixture``
    ``floor(n/2)`` singletons plus ``ceil(n**(1-alpha)/2)`` perfectly
    correlated clusters of size ``ceil(n**alpha)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache

import numpy as np

from ..core import ClusteredSample, ClusterIndex
from ..errors import NonPsdCovariance, WrongConfig
from .rng import stream

__all__ = [
    "FAMILIES",
    "DgpSpec",
    "generate",
    "theoretical_cluster_variance",
    "brute_force_cluster_variance",
    "within_cluster_covariance",
    "check_dgp",
]

FAMILIES = (
    "independent",
    "equicorrelated_perfect",
    "inverse_distance",
    "random_walk",
    "two_size_mixture",
)


def _ceil(v: float) -> int:
    # guard against powers landing a hair above an integer
    r = round(v)
    return int(r) if abs(v - r) < 1e-9 * max(1.0, v) else math.ceil(v)


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of one clustered DGP.

    Cluster sizes come either from ``(n, alpha)``, giving clusters of size
    ``ceil(n**alpha)`` with the last one truncated so sizes sum to ``n``, or
    from an explicit ``clusters x cluster_size`` layout. The two-size mixture
    always uses ``(n, alpha)`` and its realized total may differ from ``n``.
    """

    family: str
    alpha: float | None = None
    n: int | None = None
    clusters: int | None = None
    cluster_size: int | None = None
    p: int = 1
    lag_offset: float = 0.0

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise WrongConfig(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.p < 1:
            raise WrongConfig("p must be at least 1")
        if self.lag_offset < 0:
            raise WrongConfig("lag_offset must be non-negative")
        explicit = self.clusters is not None or self.cluster_size is not None
        if explicit:
            if self.family == "two_size_mixture":
                raise WrongConfig("two_size_mixture sizes are set by n and alpha")
            if self.clusters is None or self.cluster_size is None:
                raise WrongConfig("give both clusters and cluster_size")
            if self.clusters < 1 or self.cluster_size < 1:
                raise WrongConfig("clusters and cluster_size must be positive")
            if self.n is not None or self.alpha is not None:
                raise WrongConfig("give either (n, alpha) or (clusters, cluster_size)")
        else:
            if self.n is None or self.alpha is None:
                raise WrongConfig("give either (n, alpha) or (clusters, cluster_size)")
            if self.n < 1:
                raise WrongConfig("n must be positive")
            if not 0.0 <= self.alpha < 1.0:
                raise WrongConfig("alpha must lie in [0, 1)")

    def layout(self) -> tuple[np.ndarray, bool]:
        """Cluster sizes and whether the last cluster was truncated."""
        if self.clusters is not None:
            return np.full(self.clusters, self.cluster_size, dtype=np.int64), False
        n, a = int(self.n), float(self.alpha)
        m = _ceil(n**a)
        if self.family == "two_size_mixture":
            n_big = _ceil(n ** (1.0 - a) / 2)
            sizes = np.concatenate(
                [np.ones(n // 2, dtype=np.int64), np.full(n_big, m, dtype=np.int64)]
            )
            return sizes, False
        G, rem = divmod(n, m)
        sizes = np.full(G + (rem > 0), m, dtype=np.int64)
        if rem:
            sizes[-1] = rem
        return sizes, rem > 0

    def index(self) -> ClusterIndex:
        return ClusterIndex.from_sizes(self.layout()[0])

    def with_n(self, n: int) -> DgpSpec:
        return DgpSpec(self.family, self.alpha, n, None, None, self.p, self.lag_offset)


def within_cluster_covariance(m: int, lag_offset: float = 0.0) -> np.ndarray:
    """Covariance matrix of one inverse-distance cluster of size ``m``."""
    lag = np.abs(np.subtract.outer(np.arange(m), np.arange(m))).astype(np.float64)
    with np.errstate(divide="ignore"):
        c = 1.0 / (lag_offset + lag)
    np.fill_diagonal(c, 1.0)
    return c


@lru_cache(maxsize=256)
def _inverse_distance_factor(m: int, lag_offset: float) -> np.ndarray:
    c = within_cluster_covariance(m, lag_offset)
    try:
        f = np.linalg.cholesky(c)
    except np.linalg.LinAlgError:
        # singular but PSD (e.g. m = 2 without offset) still has a square root
        w, v = np.linalg.eigh(c)
        if w[0] < -1e-10 * w[-1]:
            raise NonPsdCovariance(
                f"inverse-distance covariance of size {m} with lag offset "
                f"{lag_offset:g} has eigenvalue {w[0]:.4g} < 0"
            ) from None
        f = v * np.sqrt(np.clip(w, 0.0, None))
    f.setflags(write=False)
    return f


def check_dgp(dgp: DgpSpec) -> None:
    """Fail early if ``dgp`` cannot be sampled (raises :class:`NonPsdCovariance`)."""
    if dgp.family == "inverse_distance":
        for m in np.unique(dgp.layout()[0]):
            _inverse_distance_factor(int(m), float(dgp.lag_offset))


def generate(dgp: DgpSpec, seed=None) -> ClusteredSample:
    """Draw one sample from ``dgp``.

    ``seed`` may be an int, a :class:`numpy.random.Generator` or ``None``.

    Raises
    ------
    NonPsdCovariance
        An inverse-distance cluster covariance is not positive semidefinite.
        Without a lag offset this happens for every cluster size of 3 or more.
    """
    rng = seed if isinstance(seed, np.random.Generator) else stream(0 if seed is None else seed)
    sizes, _ = dgp.layout()
    index = ClusterIndex.from_sizes(sizes)
    n, p, G = index.n, dgp.p, index.G
    fam = dgp.family

    if fam == "independent":
        data = rng.standard_normal((n, p))
    elif fam in ("equicorrelated_perfect", "two_size_mixture"):
        data = np.repeat(rng.standard_normal((G, p)), sizes, axis=0)
    elif fam == "random_walk":
        eps = rng.standard_normal((n, p))
        cs = np.cumsum(eps, axis=0)
        starts = index.offsets
        base = np.vstack([np.zeros((1, p)), cs[starts[1:] - 1]])
        data = cs - np.repeat(base, sizes, axis=0)
    else:
        eps = rng.standard_normal((n, p))
        data = np.empty_like(eps)
        for m in np.unique(sizes):
            f = _inverse_distance_factor(int(m), float(dgp.lag_offset))
            rows = np.concatenate([np.arange(o, o + m) for o in index.offsets[sizes == m]])
            blk = eps[rows].reshape(-1, m, p)
            data[rows] = np.einsum("jk,gkp->gjp", f, blk).reshape(-1, p)
    return ClusteredSample(data, index)


def theoretical_cluster_variance(family: str, m: int, lag_offset: float = 0.0, *, exact: bool = False):
    """Exact variance of one cluster sum of size ``m`` (per coordinate).

    With ``exact=True`` the result is an ``int`` or :class:`fractions.Fraction`
    (the lag offset must then be an integer for the inverse-distance family).
    """
    if m < 1:
        raise WrongConfig("cluster size must be at least 1")
    if family not in FAMILIES:
        raise WrongConfig(f"family must be one of {FAMILIES}, got {family!r}")
    if family == "independent":
        v = m
    elif family in ("equicorrelated_perfect", "two_size_mixture"):
        v = m * m
    elif family == "random_walk":
        v = m * (m + 1) * (2 * m + 1) // 6
    else:
        if exact:
            off = Fraction(lag_offset)
            v = m + 2 * sum(Fraction(m - d) / (off + d) for d in range(1, m))
        else:
            v = m + 2.0 * sum((m - d) / (lag_offset + d) for d in range(1, m))
    return v if exact else float(v)


def brute_force_cluster_variance(family: str, m: int, lag_offset: int = 0):
    """``sum_{j,l} cov(X_j, X_l)`` by explicit double loop in exact arithmetic."""
    total = Fraction(0)
    for j in range(1, m + 1):
        for l in range(1, m + 1):
            if family == "independent":
                c = int(j == l)
            elif family in ("equicorrelated_perfect", "two_size_mixture"):
                c = 1
            elif family == "random_walk":
                c = min(j, l)
            elif family == "inverse_distance":
                c = 1 if j == l else Fraction(1, lag_offset + abs(j - l))
            else:
                raise WrongConfig(f"unknown family {family!r}")
            total += c
    return total
