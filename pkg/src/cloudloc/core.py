"""Point-cloud primitives: types, voxel downsampling, knn, box cropping.

Coordinates are meters unless a cloud is tagged ``normalized``. All
operations are pure functions over immutable inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import EmptyInput, InsufficientPoints

FRAMES = ("world", "local", "normalized")


@dataclass(frozen=True)
class PointCloud:
    """An ordered set of 3D points with optional per-point feature vectors."""

    points: np.ndarray  # (N, 3) float64
    features: Optional[np.ndarray] = None  # (N, F) float64
    frame: str = "world"

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must be (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points contain NaN/Inf")
        object.__setattr__(self, "points", pts)
        if self.features is not None:
            feats = np.asarray(self.features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != pts.shape[0]:
                raise ValueError(
                    f"features must be (N, F) with N={pts.shape[0]}, got {feats.shape}"
                )
            if not np.all(np.isfinite(feats)):
                raise ValueError("features contain NaN/Inf")
            object.__setattr__(self, "features", feats)
        if self.frame not in FRAMES:
            raise ValueError(f"frame must be one of {FRAMES}, got {self.frame!r}")

    def __len__(self):
        return self.points.shape[0]

    @property
    def feature_dim(self) -> int:
        return 0 if self.features is None else self.features.shape[1]

    def with_frame(self, frame: str) -> "PointCloud":
        return PointCloud(self.points, self.features, frame)


@dataclass(frozen=True)
class Aabb:
    """Axis-aligned box, closed on both faces."""

    min_corner: np.ndarray
    max_corner: np.ndarray

    def __post_init__(self):
        lo = np.asarray(self.min_corner, dtype=np.float64).reshape(3)
        hi = np.asarray(self.max_corner, dtype=np.float64).reshape(3)
        if np.any(lo > hi):
            raise ValueError(f"min_corner {lo} exceeds max_corner {hi}")
        object.__setattr__(self, "min_corner", lo)
        object.__setattr__(self, "max_corner", hi)

    @classmethod
    def centered(cls, center, extent) -> "Aabb":
        c = np.asarray(center, dtype=np.float64).reshape(3)
        e = np.asarray(extent, dtype=np.float64).reshape(3)
        return cls(c - e / 2.0, c + e / 2.0)


def voxel_downsample(cloud: PointCloud, cell_size: float,
                     origin=None) -> PointCloud:
    """Replace the points of every occupied voxel by their centroid.

    The voxel grid origin defaults to the cloud's own min corner, which
    makes the result stable under translations that are exact multiples
    of the cell; cascaded downsampling passes a fixed origin instead so
    all stages share one grid frame. Features, when present, are
    averaged per voxel.
    """
    if cell_size <= 0:
        raise ValueError(f"cell_size must be > 0, got {cell_size}")
    n = len(cloud)
    if n == 0:
        raise EmptyInput("voxel_downsample: empty cloud")
    if origin is None:
        origin = cloud.points.min(axis=0)
    keys = np.floor((cloud.points - origin) / cell_size).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    m = uniq.shape[0]
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    centroids = np.zeros((m, 3))
    np.add.at(centroids, inverse, cloud.points)
    centroids /= counts[:, None]
    feats = None
    if cloud.features is not None:
        feats = np.zeros((m, cloud.features.shape[1]))
        np.add.at(feats, inverse, cloud.features)
        feats /= counts[:, None]
    return PointCloud(centroids, feats, cloud.frame)


def voxel_occupancy_count(points: np.ndarray, cell_size: float) -> int:
    """Number of occupied voxels under the min-corner-origin convention."""
    pts = np.asarray(points, dtype=np.float64)
    keys = np.floor((pts - pts.min(axis=0)) / cell_size).astype(np.int64)
    return np.unique(keys, axis=0).shape[0]


def knn(cloud: PointCloud, query, k: int):
    """The k nearest neighbors of ``query``, ascending by distance.

    If the query coincides with a cloud point, that point (the lowest
    such index) is excluded as a self-match. Ties are broken by lower
    index. Returns a list of (index, distance) pairs.
    """
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    q = np.asarray(query, dtype=np.float64).reshape(3)
    n = len(cloud)
    if n == 0:
        raise EmptyInput("knn: empty cloud")
    d = np.linalg.norm(cloud.points - q, axis=1)
    exclude = -1
    zero = np.nonzero(d == 0.0)[0]
    if zero.size:
        exclude = int(zero[0])
    available = n - (1 if exclude >= 0 else 0)
    if k > available:
        raise InsufficientPoints(f"knn: k={k} but only {available} candidates")
    order = np.lexsort((np.arange(n), d))
    out = []
    for idx in order:
        if idx == exclude:
            continue
        out.append((int(idx), float(d[idx])))
        if len(out) == k:
            break
    return out


def pairwise_knn_indices(points: np.ndarray, k: int) -> np.ndarray:
    """(N, k) neighbor indices for every point, self excluded.

    Ties are broken by lower index; used by the refinement stages so the
    brute-force oracle and the production path agree exactly.
    """
    pts = np.asarray(points, dtype=np.float64)
    n = pts.shape[0]
    if k >= n:
        raise InsufficientPoints(f"need more than k={k} points, have {n}")
    sq = np.einsum("ij,ij->i", pts, pts)
    out = np.empty((n, k), dtype=np.int64)
    chunk = max(1, min(n, int(1e7 // max(n, 1))))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        rows = np.arange(start, stop)
        d2 = sq[rows, None] + sq[None, :] - 2.0 * (pts[rows] @ pts.T)
        np.maximum(d2, 0.0, out=d2)
        cand = np.argpartition(d2, k, axis=1)[:, : k + 1]
        cand.sort(axis=1)  # ascending index, so stable sort breaks ties low
        vals = np.take_along_axis(d2, cand, axis=1)
        order = np.argsort(vals, axis=1, kind="stable")
        cand = np.take_along_axis(cand, order, axis=1)
        is_self = cand == rows[:, None]
        no_self = ~is_self.any(axis=1)
        is_self[no_self, -1] = True
        first_self = is_self.argmax(axis=1)
        drop = np.zeros_like(is_self)
        drop[np.arange(len(rows)), first_self] = True
        out[rows] = cand[~drop].reshape(len(rows), k)
    return out


def crop_aabb(cloud: PointCloud, box: Aabb) -> PointCloud:
    """Points inside the closed box, input order preserved."""
    pts = cloud.points
    mask = np.all((pts >= box.min_corner) & (pts <= box.max_corner), axis=1)
    feats = cloud.features[mask] if cloud.features is not None else None
    return PointCloud(pts[mask], feats, cloud.frame)
