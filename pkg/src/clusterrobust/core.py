"""Clustered data model, cluster sums and cluster-size diagnostics."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Hashable, Sequence

import numpy as np

from .errors import (
    DiagnosticWarning,
    EmptyInput,
    InvalidMomentOrder,
    LengthMismatch,
    NonFiniteEntry,
)

__all__ = [
    "ClusterIndex",
    "ClusteredSample",
    "HeterogeneityDiagnostics",
    "build_sample",
    "cluster_sums",
    "sample_mean",
    "heterogeneity_diagnostics",
]


@dataclass(frozen=True)
class ClusterIndex:
    """Partition of ``n`` stacked observations into ``G`` contiguous blocks."""

    sizes: np.ndarray
    offsets: np.ndarray = field(init=False)

    def __post_init__(self):
        sizes = np.asarray(self.sizes, dtype=np.int64).ravel()
        if sizes.size == 0:
            raise EmptyInput("a cluster index needs at least one cluster")
        if np.any(sizes < 1):
            raise ValueError("cluster sizes must be positive")
        sizes.setflags(write=False)
        offsets = np.concatenate(([0], np.cumsum(sizes)[:-1]))
        offsets.setflags(write=False)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "offsets", offsets)

    @classmethod
    def from_sizes(cls, sizes: Sequence[int]) -> ClusterIndex:
        return cls(np.asarray(sizes))

    @property
    def n(self) -> int:
        return int(self.sizes.sum())

    @property
    def G(self) -> int:
        return int(self.sizes.size)

    def labels(self) -> np.ndarray:
        """Cluster number (0-based) of every stacked observation."""
        return np.repeat(np.arange(self.G), self.sizes)

    def blocks(self):
        """Yield ``slice`` objects selecting each cluster's rows."""
        for start, size in zip(self.offsets, self.sizes):
            yield slice(int(start), int(start + size))

    def __eq__(self, other):
        if not isinstance(other, ClusterIndex):
            return NotImplemented
        return np.array_equal(self.sizes, other.sizes)

    def __hash__(self):
        return hash(self.sizes.tobytes())


@dataclass(frozen=True, eq=False)
class ClusteredSample:
    """An ``n x p`` observation matrix stacked cluster by cluster.

    Rows ``index.offsets[g] : index.offsets[g] + index.sizes[g]`` hold the
    observations of cluster ``g``. The data array is stored read-only.
    """

    data: np.ndarray
    index: ClusterIndex
    column_names: tuple[str, ...] | None = None

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64, copy=True)
        if data.ndim == 1:
            data = data[:, None]
        if data.ndim != 2 or data.shape[0] == 0:
            raise EmptyInput("observation matrix must be a non-empty 2-d array")
        if data.shape[0] != self.index.n:
            raise LengthMismatch(
                f"data has {data.shape[0]} rows but the index covers {self.index.n}"
            )
        _check_finite(data)
        if self.column_names is not None:
            names = tuple(str(c) for c in self.column_names)
            if len(names) != data.shape[1]:
                raise LengthMismatch("column_names length does not match data width")
            object.__setattr__(self, "column_names", names)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.index.n

    @property
    def G(self) -> int:
        return self.index.G

    @property
    def p(self) -> int:
        return self.data.shape[1]

    def cluster(self, g: int) -> np.ndarray:
        start = self.index.offsets[g]
        return self.data[start : start + self.index.sizes[g]]

    def columns(self, cols: Sequence[int]) -> ClusteredSample:
        names = None
        if self.column_names is not None:
            names = tuple(self.column_names[c] for c in cols)
        return ClusteredSample(self.data[:, list(cols)], self.index, names)

    def with_data(self, data: np.ndarray) -> ClusteredSample:
        """Same clustering, new observations (used for transformed samples)."""
        return ClusteredSample(data, self.index)


def _check_finite(data: np.ndarray) -> None:
    bad = ~np.isfinite(data)
    if bad.any():
        row, col = np.argwhere(bad)[0]
        raise NonFiniteEntry(int(row), int(col))


def build_sample(
    rows,
    cluster_ids: Sequence[Hashable],
    column_names: Sequence[str] | None = None,
) -> ClusteredSample:
    """Group observation rows by cluster label.

    Clusters are ordered by first appearance of their label and rows keep
    their original order within each cluster.

    Examples
    --------
    >>> s = build_sample([[1.0], [2.0], [3.0]], ["a", "b", "a"])
    >>> s.index.sizes.tolist(), s.data.ravel().tolist()
    ([2, 1], [1.0, 3.0, 2.0])
    """
    data = np.asarray(rows, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if data.size == 0 or data.shape[0] == 0:
        raise EmptyInput("no observations supplied")
    ids = list(cluster_ids)
    if len(ids) != data.shape[0]:
        raise LengthMismatch(
            f"{len(ids)} cluster labels supplied for {data.shape[0]} rows"
        )
    _check_finite(data)

    first_seen: dict[Hashable, int] = {}
    codes = np.empty(len(ids), dtype=np.int64)
    for i, label in enumerate(ids):
        codes[i] = first_seen.setdefault(label, len(first_seen))
    # stable sort keeps file order within each cluster
    order = np.argsort(codes, kind="stable")
    sizes = np.bincount(codes, minlength=len(first_seen))
    return ClusteredSample(data[order], ClusterIndex(sizes), column_names)


def cluster_sums(sample: ClusteredSample) -> np.ndarray:
    """Within-cluster sums, one row per cluster (``G x p``).

    Accumulated in extended precision and rounded once to float64.
    """
    acc = np.add.reduceat(
        sample.data.astype(np.longdouble), sample.index.offsets, axis=0
    )
    return acc.astype(np.float64)


def sample_mean(sample: ClusteredSample) -> np.ndarray:
    """Overall mean computed as ``(1/n) * sum_g cluster_sum_g``."""
    acc = np.add.reduceat(
        sample.data.astype(np.longdouble), sample.index.offsets, axis=0
    )
    return (acc.sum(axis=0) / sample.n).astype(np.float64)


@dataclass(frozen=True)
class HeterogeneityDiagnostics:
    """Functionals of the cluster sizes entering the regularity conditions.

    ``a2_bound`` and ``a3_bound`` are evaluated at the moment order ``r``;
    the methods of the same name evaluate them at any other order.
    ``warnings`` lists advisory flags only, never errors.
    """

    r: float
    n: int
    G: int
    max_share: float
    sum_sq_share: float
    a2_bound: float
    a2_max: float
    a3_bound: float
    a3_max: float
    thresholds: dict
    warnings: tuple[str, ...]
    sizes: np.ndarray = field(repr=False)

    def a2_bound_at(self, r: float) -> float:
        return _power_bound(self.sizes, r, self.n)

    def a3_bound_at(self, r: float) -> float:
        return _power_bound(self.sizes.astype(np.float64) ** 2, r, self.n)

    def to_dict(self) -> dict:
        return {
            "r": self.r,
            "n": self.n,
            "G": self.G,
            "max_share": self.max_share,
            "sum_sq_share": self.sum_sq_share,
            "a2_bound": self.a2_bound,
            "a2_max": self.a2_max,
            "a3_bound": self.a3_bound,
            "a3_max": self.a3_max,
            "thresholds": dict(self.thresholds),
            "warnings": list(self.warnings),
        }


def _power_bound(values: np.ndarray, r: float, n: int) -> float:
    # (sum v^r)^(2/r) / n, factored through the max to avoid overflow
    v = np.asarray(values, dtype=np.float64)
    top = v.max()
    s = np.sum((v / top) ** r)
    return float(top**2 * s ** (2.0 / r) / n)


def heterogeneity_diagnostics(
    index: ClusterIndex,
    r: float = 2.0,
    *,
    max_share_threshold: float = 0.05,
    a2_max_threshold: float = 1.0,
    warn: bool = False,
) -> HeterogeneityDiagnostics:
    """Cluster-size heterogeneity functionals at moment order ``r``.

    Parameters
    ----------
    index : ClusterIndex
    r : float
        Moment order, at least 2.
    max_share_threshold, a2_max_threshold : float
        Advisory thresholds. The asymptotic conditions give no finite-sample
        cut-offs; these defaults are a convention.
    warn : bool
        Also emit the flags as :class:`DiagnosticWarning`.
    """
    r = float(r)
    if not np.isfinite(r) or r < 2:
        raise InvalidMomentOrder(f"moment order must be >= 2, got {r}")
    sizes = index.sizes.astype(np.float64)
    n = index.n
    max_share = float(sizes.max() / n)
    sum_sq_share = float(np.sum(sizes**2) / n**2)
    a2_max = float(sizes.max() ** 2 / n)
    flags = []
    if max_share > max_share_threshold:
        flags.append(
            f"max_share={max_share:.6g} exceeds advisory threshold {max_share_threshold:g}"
        )
    if a2_max > a2_max_threshold:
        flags.append(
            f"a2_max={a2_max:.6g} exceeds advisory threshold {a2_max_threshold:g}"
        )
    if warn:
        for msg in flags:
            warnings.warn(msg, DiagnosticWarning, stacklevel=2)
    return HeterogeneityDiagnostics(
        r=r,
        n=n,
        G=index.G,
        max_share=max_share,
        sum_sq_share=sum_sq_share,
        a2_bound=_power_bound(sizes, r, n),
        a2_max=a2_max,
        a3_bound=_power_bound(sizes**2, r, n),
        a3_max=float(sizes.max() ** 4 / n),
        thresholds={
            "max_share": max_share_threshold,
            "a2_max": a2_max_threshold,
        },
        warnings=tuple(flags),
        sizes=index.sizes,
    )
