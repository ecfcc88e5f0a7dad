"""Point containers, farthest point sampling and neighborhood grouping.

Distances are computed exactly from coordinate differences; ties are always broken by the lowest
point index so results are reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

_CHUNK = 256
_BLOCK = 128


@dataclass
class PointCloud:
    coords: np.ndarray  # (N, 3)
    features: Optional[np.ndarray] = None  # (N, c)
    labels: Optional[np.ndarray] = None  # (N,) or scalar class id
    scalars: Optional[dict] = None  # extra per-point columns, e.g. "heat"

    def __post_init__(self):
        self.coords = np.asarray(self.coords, dtype=np.float64)
        if self.coords.ndim != 2 or self.coords.shape[1] != 3:
            raise ValueError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.coords.shape[0] < 1:
            raise ValueError("a point cloud needs at least one point")
        if not np.all(np.isfinite(self.coords)):
            raise ValueError("point cloud contains non-finite coordinates")
        if self.features is not None:
            self.features = np.asarray(self.features)
            if self.features.ndim != 2 or self.features.shape[0] != self.n:
                raise ValueError(f"features must have {self.n} rows, got shape {self.features.shape}")

    @property
    def n(self) -> int:
        return self.coords.shape[0]

    def __len__(self):
        return self.n


@dataclass
class Neighborhood:
    center: int
    members: np.ndarray  # (k,) point indices
    rel: np.ndarray  # (k, 3) coords[center] - coords[member]
    dist: np.ndarray  # (k,)
    refilled: int = 0

    @property
    def k(self) -> int:
        return len(self.members)


def _coords(cloud) -> np.ndarray:
    return cloud.coords if isinstance(cloud, PointCloud) else np.asarray(cloud, dtype=np.float64)


def _pair_dist(coords: np.ndarray, centers: np.ndarray) -> np.ndarray:
    """Exact Euclidean distances, shape (len(centers), N), via direct differences."""
    out = np.empty((len(centers), len(coords)))
    for s in range(0, len(centers), _CHUNK):
        diff = coords[None, :, :] - coords[centers[s:s + _CHUNK], None, :]
        out[s:s + _CHUNK] = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff))
    return out


def farthest_point_sample(cloud, m: int, start: int = 0) -> np.ndarray:
    """Greedy farthest point sampling of ``m`` indices beginning at ``start``."""
    pts = _coords(cloud)
    n = len(pts)
    if m > n:
        raise ValueError(f"sample count exceeds population ({m} > {n})")
    if m < 1:
        raise ValueError("sample count must be at least 1")
    if not 0 <= start < n:
        raise ValueError(f"start index {start} out of range for {n} points")
    if not np.all(np.isfinite(pts)):
        raise ValueError("point cloud contains non-finite coordinates")
    out = np.empty(m, dtype=np.int64)
    out[0] = start
    d = pts - pts[start]
    mind = np.einsum("nd,nd->n", d, d)
    for i in range(1, m):
        nxt = int(np.argmax(mind))
        out[i] = nxt
        d = pts - pts[nxt]
        np.minimum(mind, np.einsum("nd,nd->n", d, d), out=mind)
    return out


def ball_query_indices(coords: np.ndarray, centers, radius: float, k: int):
    """Array form of :func:`ball_query_group`.

    Returns ``(members (M, k), refilled (M,))``. Points are scanned in
    ascending index blocks and a center stops scanning once it holds ``k``
    qualifiers, which gives the same result as a full scan.
    """
    if radius <= 0:
        raise ValueError("radius must be positive")
    if k < 1:
        raise ValueError("k must be at least 1")
    centers = np.asarray(centers, dtype=np.int64)
    m = len(centers)
    if m == 0:
        return np.zeros((0, k), dtype=np.int64), np.zeros(0, dtype=np.int64)
    coords = np.asarray(coords, dtype=np.float64)
    members = np.zeros((m, k), dtype=np.int64)
    count = np.zeros(m, dtype=np.int64)
    active = np.arange(m)
    for s in range(0, len(coords), _BLOCK):
        if len(active) == 0:
            break
        diff = coords[None, s:s + _BLOCK, :] - coords[centers[active], None, :]
        inside = np.sqrt(np.einsum("mnd,mnd->mn", diff, diff)) <= radius
        rows, cols = np.nonzero(inside)  # row-major, so columns ascend within each row
        first = np.searchsorted(rows, rows)
        rank = count[active[rows]] + np.arange(len(rows)) - first
        take = rank < k
        members[active[rows[take]], rank[take]] = s + cols[take]
        count[active] = np.minimum(count[active] + inside.sum(axis=1), k)
        active = active[count[active] < k]
    # refill with the first qualifier; the center itself always qualifies
    slot = np.arange(k)[None, :]
    members = np.where(slot < count[:, None], members, members[:, :1])
    return members, (k - count).astype(np.int64)


def knn_indices(coords: np.ndarray, centers, k: int) -> np.ndarray:
    """Array form of :func:`knn_group`: ``(M, k)`` member indices, nearest first."""
    n = len(coords)
    if k > n:
        raise ValueError(f"k={k} exceeds point count {n}")
    if k < 1:
        raise ValueError("k must be at least 1")
    centers = np.asarray(centers, dtype=np.int64)
    if len(centers) == 0:
        return np.zeros((0, k), dtype=np.int64)
    dist = _pair_dist(coords, centers)
    return np.argsort(dist, axis=1, kind="stable")[:, :k]


def _neighborhoods(coords, centers, members, refilled) -> list[Neighborhood]:
    out = []
    for c, mem, rf in zip(centers, members, refilled):
        rel = coords[c] - coords[mem]
        dist = np.sqrt(np.einsum("kd,kd->k", rel, rel))
        out.append(Neighborhood(int(c), mem.copy(), rel, dist, int(rf)))
    return out


def ball_query_group(cloud, centers, radius: float, k: int) -> list[Neighborhood]:
    """Up to ``k`` points within ``radius`` (closed ball) of each center.

    Qualifiers are taken in ascending index order; short neighborhoods are
    refilled with copies of their first qualifier.
    """
    coords = _coords(cloud)
    members, refilled = ball_query_indices(coords, centers, radius, k)
    return _neighborhoods(coords, np.asarray(centers, dtype=np.int64), members, refilled)


def knn_group(cloud, centers, k: int) -> list[Neighborhood]:
    coords = _coords(cloud)
    members = knn_indices(coords, centers, k)
    centers = np.asarray(centers, dtype=np.int64)
    return _neighborhoods(coords, centers, members, np.zeros(len(centers), dtype=np.int64))


def relative_coords(nbh: Neighborhood, cloud) -> np.ndarray:
    """``coords[center] - coords[member]`` for each member, shape (k, 3)."""
    coords = _coords(cloud)
    return coords[nbh.center] - coords[nbh.members]
