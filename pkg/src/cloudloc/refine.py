"""Query-side geometric recovery: segment a sparse odometry cloud along
its trajectory, filter statistical outliers, densify by neighbor
midpoints, and normalize scale to the unit cube.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .core import Aabb, PointCloud, crop_aabb, pairwise_knn_indices
from .errors import EmptyInput, InsufficientPoints, NoValidSegments, ParseError


@dataclass(frozen=True)
class Trajectory:
    """Timestamped poses: positions plus unit quaternions (x, y, z, w)."""

    timestamps: np.ndarray  # (M,)
    positions: np.ndarray  # (M, 3)
    quaternions: np.ndarray  # (M, 4)

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype=np.float64).reshape(-1)
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        quat = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        if not (len(ts) == len(pos) == len(quat)):
            raise ValueError("trajectory field lengths differ")
        if len(ts) >= 2 and not np.all(np.diff(ts) > 0):
            raise ValueError("timestamps must be strictly increasing")
        norms = np.linalg.norm(quat, axis=1)
        if len(quat) and np.max(np.abs(norms - 1.0)) > 1e-6:
            raise ValueError("quaternions must be unit-norm within 1e-6")
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "quaternions", quat)

    def __len__(self):
        return len(self.timestamps)


def load_trajectory(path) -> Trajectory:
    """One pose per line: `timestamp tx ty tz qx qy qz qw`; '#' comments."""
    ts, pos, quat = [], [], []
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        fields = line.split()
        if len(fields) != 8:
            raise ParseError(f"expected 8 fields, got {len(fields)}", line=lineno)
        try:
            vals = [float(x) for x in fields]
        except ValueError:
            raise ParseError(f"non-numeric pose line: {line!r}", line=lineno)
        ts.append(vals[0])
        pos.append(vals[1:4])
        quat.append(vals[4:8])
    if not ts:
        raise ParseError("trajectory file has no poses", line=1)
    return Trajectory(np.array(ts), np.array(pos), np.array(quat))


def save_trajectory(traj: Trajectory, path) -> None:
    with open(path, "w") as f:
        f.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p, q in zip(traj.timestamps, traj.positions, traj.quaternions):
            f.write(
                f"{t:.6f} {p[0]:.9g} {p[1]:.9g} {p[2]:.9g} "
                f"{q[0]:.9g} {q[1]:.9g} {q[2]:.9g} {q[3]:.9g}\n"
            )


@dataclass(frozen=True)
class FilterParams:
    k_neighbors: int = 20
    sigma_multiplier: float = 2.0

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")
        if self.sigma_multiplier < 0:
            raise ValueError("sigma_multiplier must be >= 0")


@dataclass(frozen=True)
class DensifyParams:
    # 10 suits dense direct-odometry clouds, 20 the sparser feature-based ones
    k_neighbors: int = 10

    def __post_init__(self):
        if self.k_neighbors < 1:
            raise ValueError("k_neighbors must be >= 1")


@dataclass(frozen=True)
class SubmapSpec:
    extent: Tuple[float, float, float] = (40.0, 40.0, 15.0)
    stride: float = 20.0

    def __post_init__(self):
        if self.stride <= 0 or any(e <= 0 for e in self.extent):
            raise ValueError("extent and stride must be positive")


@dataclass(frozen=True)
class QueryPointCloud:
    """A refined, unit-cube-normalized query segment."""

    cloud: PointCloud
    anchor_world: np.ndarray
    source_vo: str = "generic"

    def __post_init__(self):
        if len(self.cloud) == 0:
            raise ValueError("query cloud must be nonempty")
        if self.cloud.points.min() < -1e-12 or self.cloud.points.max() > 1 + 1e-12:
            raise ValueError("query cloud must be normalized to [0, 1]")
        object.__setattr__(
            self, "anchor_world", np.asarray(self.anchor_world, dtype=np.float64).reshape(3)
        )


def trajectory_anchors(traj: Trajectory, stride: float) -> np.ndarray:
    """Anchor positions every `stride` meters of cumulative arc length,
    starting at the first pose. A trajectory shorter than the stride
    yields the single starting anchor."""
    pos = traj.positions
    seg = np.linalg.norm(np.diff(pos, axis=0), axis=1)
    cum = np.concatenate([[0.0], np.cumsum(seg)])
    total = cum[-1]
    if total < stride:
        return pos[:1].copy()
    targets = np.arange(0.0, total + 1e-9, stride)
    anchors = np.empty((len(targets), 3))
    for i, s in enumerate(targets):
        j = np.searchsorted(cum, s, side="right") - 1
        j = min(j, len(seg) - 1)
        frac = 0.0 if seg[j] == 0 else (s - cum[j]) / seg[j]
        anchors[i] = pos[j] + frac * (pos[j + 1] - pos[j])
    return anchors


def segment_submaps(traj: Trajectory, cloud: PointCloud, spec: SubmapSpec):
    """Crop one axis-aligned box per trajectory anchor; empty crops are
    dropped. Returns a list of (anchor_world, PointCloud)."""
    if len(traj) < 1:
        raise ValueError("trajectory needs at least one pose")
    anchors = trajectory_anchors(traj, spec.stride)
    out = []
    for anchor in anchors:
        box = Aabb.centered(anchor, spec.extent)
        segment = crop_aabb(cloud, box)
        if len(segment) > 0:
            out.append((anchor, segment))
    return out


def neighbor_mean_distances(points: np.ndarray, k: int) -> np.ndarray:
    """t_i = mean distance from each point to its k nearest neighbors."""
    idx = pairwise_knn_indices(points, k)
    diffs = points[idx] - points[:, None, :]
    return np.linalg.norm(diffs, axis=2).mean(axis=1)


def remove_outliers(cloud: PointCloud, params: FilterParams) -> PointCloud:
    """Drop points whose mean K-neighbor distance t_i exceeds
    mean(t) + mu * std(t). With zero spread no point is an outlier."""
    n = len(cloud)
    if n <= params.k_neighbors:
        raise InsufficientPoints(
            f"remove_outliers: need > {params.k_neighbors} points, have {n}"
        )
    t = neighbor_mean_distances(cloud.points, params.k_neighbors)
    t_mean = t.mean()
    sigma = t.std()  # population std
    if sigma == 0.0:
        return cloud
    keep = t < t_mean + params.sigma_multiplier * sigma
    feats = cloud.features[keep] if cloud.features is not None else None
    return PointCloud(cloud.points[keep], feats, cloud.frame)


def densify(cloud: PointCloud, params: DensifyParams) -> PointCloud:
    """Insert the midpoint between every point and each of its K nearest
    neighbors; coincident midpoints from symmetric pairs appear once.
    Inserted points carry no features, so the output is geometry-only."""
    n = len(cloud)
    k = params.k_neighbors
    if n <= k:
        raise InsufficientPoints(f"densify: need > {k} points, have {n}")
    idx = pairwise_knn_indices(cloud.points, k)
    src = np.repeat(np.arange(n), k)
    dst = idx.ravel()
    mids = (cloud.points[src] + cloud.points[dst]) / 2.0
    mids = np.unique(mids, axis=0)
    # a midpoint may also coincide with an existing point; drop those too
    all_pts = np.concatenate([cloud.points, mids], axis=0)
    _, first, inverse = np.unique(
        all_pts, axis=0, return_index=True, return_inverse=True
    )
    inverse = inverse.ravel()
    duplicates_original = first[inverse[n:]] < n
    out = np.concatenate([cloud.points, mids[~duplicates_original]], axis=0)
    return PointCloud(out, None, cloud.frame)


def normalize_scale(cloud: PointCloud) -> PointCloud:
    """Translate to the origin and divide by the largest axis extent so
    every coordinate lands in [0, 1]. A single point maps to the origin."""
    if len(cloud) == 0:
        raise EmptyInput("normalize_scale: empty cloud")
    lo = cloud.points.min(axis=0)
    extent = cloud.points.max(axis=0) - lo
    s = extent.max()
    if s == 0.0:
        return PointCloud(np.zeros_like(cloud.points), cloud.features, "normalized")
    return PointCloud(
        np.clip((cloud.points - lo) / s, 0.0, 1.0), cloud.features, "normalized"
    )


@dataclass
class RefineWarnings:
    dropped_segments: List[Tuple[int, str]] = field(default_factory=list)


def build_qpc(
    traj: Trajectory,
    cloud: PointCloud,
    spec: SubmapSpec = SubmapSpec(),
    filter_params: FilterParams = FilterParams(),
    densify_params: DensifyParams = DensifyParams(),
    source_vo: str = "generic",
    warnings: Optional[RefineWarnings] = None,
) -> List[QueryPointCloud]:
    """Segment -> remove_outliers -> densify -> normalize_scale.

    Segments with too few points for either K are dropped with a warning
    record; if every segment drops, raises NoValidSegments."""
    segments = segment_submaps(traj, cloud, spec)
    out = []
    for i, (anchor, segment) in enumerate(segments):
        try:
            filtered = remove_outliers(segment, filter_params)
            dense = densify(filtered, densify_params)
        except InsufficientPoints as exc:
            if warnings is not None:
                warnings.dropped_segments.append((i, str(exc)))
            continue
        normalized = normalize_scale(dense)
        out.append(QueryPointCloud(normalized, anchor, source_vo))
    if not out:
        raise NoValidSegments("every trajectory segment was dropped")
    return out
