"""Small statistical utilities: KS distance, streaming covariance, subspace angles."""

from __future__ import annotations

import numpy as np

from .errors import ConfigError, DimensionMismatchError

__all__ = [
    "ks_distance",
    "max_ks_distance",
    "CovarianceAccumulator",
    "principal_angles",
]


def ks_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Two-sample Kolmogorov-Smirnov statistic sup_x |F_a(x) - F_b(x)|."""
    a = np.sort(np.asarray(a, dtype=float).reshape(-1))
    b = np.sort(np.asarray(b, dtype=float).reshape(-1))
    if a.size == 0 or b.size == 0:
        raise ConfigError("KS distance needs nonempty samples")
    both = np.concatenate([a, b])
    cdf_a = np.searchsorted(a, both, side="right") / a.size
    cdf_b = np.searchsorted(b, both, side="right") / b.size
    return float(np.abs(cdf_a - cdf_b).max())


def max_ks_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Max over coordinates of the marginal two-sample KS distances."""
    a = np.atleast_2d(np.asarray(a, dtype=float))
    b = np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError("samples have different dimensions")
    return max(ks_distance(a[:, i], b[:, i]) for i in range(a.shape[1]))


class CovarianceAccumulator:
    """One-pass vector mean/covariance with stable pairwise merging.

    Batches update a running (count, mean, M2 matrix) triple via the
    parallel combination rule, so large sample streams need no second data
    pass and accumulators merge associatively (fixed merge order gives
    bit-stable output).
    """

    def __init__(self, dim: int):
        self.dim = dim
        self.count = 0
        self.mean = np.zeros(dim)
        self._m2 = np.zeros((dim, dim))

    def update(self, batch: np.ndarray) -> "CovarianceAccumulator":
        x = np.atleast_2d(np.asarray(batch, dtype=float))
        if x.shape[1] != self.dim:
            raise DimensionMismatchError(
                f"batch dimension {x.shape[1]} != accumulator dimension {self.dim}"
            )
        n = x.shape[0]
        if n == 0:
            return self
        bmean = x.mean(axis=0)
        centered = x - bmean
        bm2 = centered.T @ centered
        self._merge(n, bmean, bm2)
        return self

    def merge(self, other: "CovarianceAccumulator") -> "CovarianceAccumulator":
        if other.dim != self.dim:
            raise DimensionMismatchError("cannot merge accumulators of different dims")
        if other.count:
            self._merge(other.count, other.mean, other._m2)
        return self

    def _merge(self, n: int, mean: np.ndarray, m2: np.ndarray) -> None:
        if self.count == 0:
            self.count, self.mean, self._m2 = n, mean.copy(), m2.copy()
            return
        total = self.count + n
        delta = mean - self.mean
        self._m2 = self._m2 + m2 + np.outer(delta, delta) * (self.count * n / total)
        self.mean = self.mean + delta * (n / total)
        self.count = total

    def covariance(self, ddof: int = 1) -> np.ndarray:
        if self.count <= ddof:
            return np.full((self.dim, self.dim), np.nan)
        return self._m2 / (self.count - ddof)


def principal_angles(basis_a: np.ndarray, basis_b: np.ndarray) -> np.ndarray:
    """Principal angles (radians, ascending) between two column-span subspaces."""
    qa, _ = np.linalg.qr(np.asarray(basis_a, dtype=float))
    qb, _ = np.linalg.qr(np.asarray(basis_b, dtype=float))
    sv = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return np.arccos(np.clip(sv, -1.0, 1.0))
