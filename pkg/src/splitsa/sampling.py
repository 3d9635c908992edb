"""Farthest point sampling, its foreground-biased variant, and ball query.

Greedy selection compares squared Euclidean distances. The foreground bias is
applied as ``w0**2`` on squared distances, which orders candidates exactly as
the un-squared weighted distance does because ``w0 > 0``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ArgumentError
from .pointcloud import PaintedPointCloud, PointCloud, foreground_indices


def _coords(cloud) -> np.ndarray:
    if isinstance(cloud, (PointCloud, PaintedPointCloud)):
        return cloud.xyz.astype(np.float64)
    xyz = np.asarray(cloud, dtype=np.float64)
    if xyz.ndim != 2 or xyz.shape[1] != 3:
        raise ArgumentError(f"expected (N, 3) coordinates, got shape {xyz.shape}")
    return xyz


@dataclass(frozen=True)
class BiasSpec:
    """Weight coefficient and the foreground index set it applies to."""

    w0: float
    foreground: tuple

    def __post_init__(self):
        if not (math.isfinite(self.w0) and self.w0 > 0):
            raise ArgumentError(f"w0 must be finite and > 0, got {self.w0}")
        fg = np.unique(np.asarray(self.foreground, dtype=np.int64).reshape(-1))
        if fg.size and fg[0] < 0:
            raise ArgumentError("foreground indices must be non-negative")
        object.__setattr__(self, "foreground", tuple(int(i) for i in fg))

    @classmethod
    def from_painted(cls, p: PaintedPointCloud, w0: float) -> "BiasSpec":
        return cls(w0, tuple(foreground_indices(p)))

    def mask(self, n: int) -> np.ndarray:
        m = np.zeros(n, dtype=bool)
        if self.foreground:
            if self.foreground[-1] >= n:
                raise ArgumentError(
                    f"foreground index {self.foreground[-1]} out of range for {n} points")
            m[list(self.foreground)] = True
        return m


@dataclass(frozen=True)
class BallQuerySpec:
    radius: float
    k: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ArgumentError(f"radius must be > 0, got {self.radius}")
        if self.k < 1:
            raise ArgumentError(f"k must be >= 1, got {self.k}")


def biased_distance(p1, p2, in_a1: bool, in_a2: bool, w0: float) -> float:
    """Euclidean distance scaled by ``w0`` when either endpoint is foreground."""
    if not w0 > 0:
        raise ArgumentError(f"w0 must be > 0, got {w0}")
    w = w0 if (in_a1 or in_a2) else 1.0
    d = math.sqrt(sum((float(a) - float(b)) ** 2 for a, b in zip(p1, p2)))
    return w * d


def _check_counts(n, m, start):
    if not 1 <= m <= n:
        raise ArgumentError(f"need 1 <= m <= N, got m={m}, N={n}")
    if not 0 <= start < n:
        raise ArgumentError(f"start index {start} out of range for {n} points")


def _greedy(xyz: np.ndarray, m: int, start: int, fg: np.ndarray | None, w0sq: float):
    n = len(xyz)
    _check_counts(n, m, start)
    out = np.empty(m, dtype=np.int64)
    mind = np.full(n, np.inf)
    taken = np.zeros(n, dtype=bool)
    cur = start
    for i in range(m):
        out[i] = cur
        taken[cur] = True
        if i == m - 1:
            break
        d = ((xyz - xyz[cur]) ** 2).sum(axis=1)
        if fg is not None:
            d = np.where(fg | fg[cur], d * w0sq, d)
        np.minimum(mind, d, out=mind)
        # argmax returns the first maximum, which gives lowest-index tie-breaking
        cur = int(np.argmax(np.where(taken, -1.0, mind)))
    return out


def fps(cloud, m: int, start: int = 0) -> np.ndarray:
    """Farthest point sampling.

    Parameters
    ----------
    cloud : PointCloud, PaintedPointCloud or array of shape (N, 3)
    m : int
        Number of centroids, ``1 <= m <= N``.
    start : int
        Index of the first centroid.

    Returns
    -------
    np.ndarray
        ``m`` distinct indices in selection order. Ties go to the lowest index.
    """
    return _greedy(_coords(cloud), m, start, None, 1.0)


def biased_fps(cloud, m: int, bias: BiasSpec, start: int = 0) -> np.ndarray:
    """Farthest point sampling under the foreground-weighted distance.

    With ``bias.w0 == 1`` the result is bit-identical to :func:`fps`.
    """
    xyz = _coords(cloud)
    fg = bias.mask(len(xyz))
    return _greedy(xyz, m, start, fg, float(bias.w0) ** 2)


def ball_query(cloud, centroids, spec: BallQuerySpec) -> np.ndarray:
    """Group up to ``k`` points within ``radius`` of each centroid.

    Members are the first ``k`` in ascending index order. Short groups are
    padded with their first member, empty ones with the centroid itself, so
    the result always has shape ``(len(centroids), k)``.
    """
    xyz = _coords(cloud)
    centroids = np.asarray(centroids, dtype=np.int64).reshape(-1)
    n = len(xyz)
    if centroids.size and (centroids.min() < 0 or centroids.max() >= n):
        raise ArgumentError("centroid index out of range")
    r2 = float(spec.radius) ** 2
    groups = np.empty((len(centroids), spec.k), dtype=np.int64)
    for row, c in enumerate(centroids):
        d = ((xyz - xyz[c]) ** 2).sum(axis=1)
        hit = np.flatnonzero(d <= r2)[:spec.k]
        if hit.size == 0:
            groups[row] = c
        else:
            groups[row, :hit.size] = hit
            groups[row, hit.size:] = hit[0]
    return groups


def split_sample(p: PaintedPointCloud, m_total: int, w0: float = 2.0,
                 start_normal: int = 0, start_bias: int = 0):
    """Sample ``m_total / 2`` centroids with plain FPS and another half with biased FPS.

    The two runs are independent, so the halves may share indices.
    """
    if m_total < 2 or m_total % 2:
        raise ArgumentError(f"m_total must be a positive even count, got {m_total}")
    half = m_total // 2
    normal = fps(p, half, start_normal)
    bias = biased_fps(p, half, BiasSpec.from_painted(p, w0), start_bias)
    return normal, bias
