"""Spatial structure of point clouds: normalization, neighborhoods, sampling.

Everything here is a pure function of immutable inputs. Coordinates are plain
numpy arrays (they are never differentiated); only ``gather_relative`` builds
graph nodes, because it feeds features into the attention layers.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor, gather_rows, reshape, sub


class InternalError(RuntimeError):
    """An invariant the caller was supposed to maintain was breached."""


@dataclass
class PointCloud:
    """N x 3 coordinates, optional N x C features, optional class label."""

    coords: np.ndarray
    features: np.ndarray | None = None
    label: int | None = None

    def __post_init__(self):
        self.coords = np.asarray(self.coords)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3 or self.coords.shape[0] < 1:
            raise ValueError(f"coords must be (N, 3) with N >= 1, got {self.coords.shape}")
        if not np.isfinite(self.coords).all():
            raise ValueError("coords must be finite")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]


@dataclass(frozen=True)
class NeighborhoodIndex:
    """N x k table of neighbor identities, self first, then by distance."""

    indices: np.ndarray

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    @property
    def n(self) -> int:
        return self.indices.shape[0]


def normalize_cloud(cloud: PointCloud) -> PointCloud:
    """Translate to zero centroid and scale the farthest point to norm 1.

    A degenerate all-equal cloud maps to all zeros. Idempotent up to float
    rounding.
    """
    centered = cloud.coords - cloud.coords.mean(axis=0)
    radius = np.sqrt((centered * centered).sum(axis=1)).max()
    if radius > 0:
        centered = centered / radius
    return PointCloud(centered.astype(cloud.coords.dtype, copy=False),
                      features=cloud.features, label=cloud.label)


def knn(coords: np.ndarray, query_coords: np.ndarray, k: int,
        self_indices: np.ndarray | None = None) -> NeighborhoodIndex:
    """k nearest source points per query, ties broken by smaller index.

    When the queries are themselves source points, pass ``self_indices`` (the
    source row of each query) to pin the center to the front of its own row;
    this keeps self-inclusion exact even for coincident points. Exact brute
    force; desk-scale clouds need no spatial index.
    """
    coords = np.asarray(coords)
    query_coords = np.asarray(query_coords)
    n = coords.shape[0]
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    if k < 1:
        raise ValueError("k must be >= 1")
    diff = query_coords[:, None, :] - coords[None, :, :]
    d2 = (diff * diff).sum(axis=2)
    if self_indices is not None:
        d2[np.arange(query_coords.shape[0]), np.asarray(self_indices)] = -1.0
    order = np.argsort(d2, axis=1, kind="stable")
    return NeighborhoodIndex(order[:, :k].astype(np.int64))


def _lex_smallest(candidates: np.ndarray, coords: np.ndarray) -> int:
    if candidates.size == 1:
        return int(candidates[0])
    pts = coords[candidates]
    order = np.lexsort((candidates, pts[:, 2], pts[:, 1], pts[:, 0]))
    return int(candidates[order[0]])


def farthest_point_sample(coords: np.ndarray, m: int) -> np.ndarray:
    """Greedy max-min subset selection of ``m`` point indices.

    The seed is the point farthest from the centroid; every later pick
    maximizes the distance to the already-chosen set. Exact distance ties are
    broken by lexicographically smallest coordinates, then smallest index, so
    statistically generic clouds sample the same point set under any input
    permutation.
    """
    coords = np.asarray(coords, dtype=np.float64)
    n = coords.shape[0]
    if not 1 <= m <= n:
        raise ValueError(f"m={m} must be in [1, {n}]")
    centroid = coords.mean(axis=0)
    d_centroid = ((coords - centroid) ** 2).sum(axis=1)
    chosen = np.empty(m, dtype=np.int64)
    chosen[0] = _lex_smallest(np.flatnonzero(d_centroid == d_centroid.max()), coords)
    free = np.ones(n, dtype=bool)
    free[chosen[0]] = False
    dist = ((coords - coords[chosen[0]]) ** 2).sum(axis=1)
    for i in range(1, m):
        masked = np.where(free, dist, -np.inf)
        pick = _lex_smallest(np.flatnonzero(masked == masked.max()), coords)
        chosen[i] = pick
        free[pick] = False
        dist = np.minimum(dist, ((coords - coords[pick]) ** 2).sum(axis=1))
    return chosen


def random_rotation(rng) -> np.ndarray:
    """Uniformly distributed 3-D rotation matrix (random unit quaternion)."""
    u1, u2, u3 = rng.random(3)
    x = np.sqrt(1 - u1) * np.sin(2 * np.pi * u2)
    y = np.sqrt(1 - u1) * np.cos(2 * np.pi * u2)
    z = np.sqrt(u1) * np.sin(2 * np.pi * u3)
    w = np.sqrt(u1) * np.cos(2 * np.pi * u3)
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def gather_relative(features: Tensor, nbr: NeighborhoodIndex) -> Tensor:
    """Relative neighbor features: out[i, j, :] = f[nbr[i, j]] - f[i]."""
    idx = nbr.indices
    n, c = features.data.shape
    if idx.min() < 0 or idx.max() >= n:
        raise InternalError(f"neighborhood index out of range for {n} points")
    gathered = gather_rows(features, idx)
    center = reshape(features, (n, 1, c))
    return sub(gathered, center)
