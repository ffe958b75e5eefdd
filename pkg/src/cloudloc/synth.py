"""Seeded synthetic worlds: analytic primitives (ground plane, boxes,
vertical cylinders) surface-sampled into Lidar-like submaps, plus
degraded odometry-like query clouds and a benchmark manifest with
ground-truth anchors. Everything is deterministic under the seed."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np

from .core import Aabb, PointCloud, crop_aabb, voxel_downsample
from .errors import EmptySubmap
from .io import save_cloud
from .refine import SubmapSpec, Trajectory, save_trajectory, trajectory_anchors


@dataclass(frozen=True)
class WorldParams:
    seed: int = 0
    extent: Tuple[float, float] = (260.0, 260.0)
    building_density: float = 0.004  # per m^2
    building_footprint: Tuple[float, float] = (4.0, 14.0)
    building_height: Tuple[float, float] = (4.0, 14.0)
    pole_density: float = 0.002
    pole_height: Tuple[float, float] = (2.0, 8.0)
    pole_radius: Tuple[float, float] = (0.15, 0.6)
    road_width: float = 8.0
    surface_density: float = 2.0  # points per m^2


@dataclass(frozen=True)
class BoxPrim:
    center: np.ndarray  # (2,) xy
    size: np.ndarray  # (3,) x, y, height


@dataclass(frozen=True)
class CylinderPrim:
    center: np.ndarray  # (2,)
    radius: float
    height: float


@dataclass(frozen=True)
class World:
    params: WorldParams
    boxes: List[BoxPrim]
    cylinders: List[CylinderPrim]


def _rng(seed, *stream) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), *map(int, stream)]))


def generate_world(params: WorldParams) -> World:
    """Poisson-count primitives scattered over the extent; the ground
    plane is implicit and always present."""
    rng = _rng(params.seed, 1)
    area = params.extent[0] * params.extent[1]
    boxes = []
    for _ in range(rng.poisson(params.building_density * area)):
        center = rng.uniform((0, 0), params.extent)
        size = np.array([
            rng.uniform(*params.building_footprint),
            rng.uniform(*params.building_footprint),
            rng.uniform(*params.building_height),
        ])
        boxes.append(BoxPrim(center, size))
    cylinders = []
    for _ in range(rng.poisson(params.pole_density * area)):
        center = rng.uniform((0, 0), params.extent)
        cylinders.append(
            CylinderPrim(center, rng.uniform(*params.pole_radius),
                         rng.uniform(*params.pole_height))
        )
    return World(params, boxes, cylinders)


def _sample_rect(rng, n, origin, u, v):
    """n points on the rectangle origin + a*u + b*v, a,b in [0,1]."""
    a = rng.uniform(0, 1, (n, 1))
    b = rng.uniform(0, 1, (n, 1))
    return origin + a * u + b * v


def _box_surface(rng, box: BoxPrim, density: float) -> np.ndarray:
    cx, cy = box.center
    sx, sy, h = box.size
    x0, y0 = cx - sx / 2, cy - sy / 2
    faces = [
        # four walls and the roof: (origin, u, v)
        ((x0, y0, 0), (sx, 0, 0), (0, 0, h)),
        ((x0, y0 + sy, 0), (sx, 0, 0), (0, 0, h)),
        ((x0, y0, 0), (0, sy, 0), (0, 0, h)),
        ((x0 + sx, y0, 0), (0, sy, 0), (0, 0, h)),
        ((x0, y0, h), (sx, 0, 0), (0, sy, 0)),
    ]
    out = []
    for origin, u, v in faces:
        area = np.linalg.norm(np.cross(u, v))
        n = rng.poisson(density * area)
        if n:
            out.append(_sample_rect(rng, n, np.array(origin, float),
                                    np.array(u, float), np.array(v, float)))
    return np.concatenate(out) if out else np.empty((0, 3))


def _cylinder_surface(rng, cyl: CylinderPrim, density: float) -> np.ndarray:
    area = 2 * math.pi * cyl.radius * cyl.height
    n = rng.poisson(max(density * area, 2.0))
    theta = rng.uniform(0, 2 * math.pi, n)
    z = rng.uniform(0, cyl.height, n)
    return np.column_stack([
        cyl.center[0] + cyl.radius * np.cos(theta),
        cyl.center[1] + cyl.radius * np.sin(theta),
        z,
    ])


def sample_lidar_submap(world: World, anchor, spec: SubmapSpec = SubmapSpec(),
                        stream: int = 0, voxel: float = 0.1) -> PointCloud:
    """Surface-sample every primitive intersecting the anchor-centered
    box, crop, and voxel-downsample at 0.1 m."""
    anchor = np.asarray(anchor, dtype=np.float64).reshape(3)
    rng = _rng(world.params.seed, 2, stream)
    box = Aabb.centered(anchor, spec.extent)
    density = world.params.surface_density
    chunks = []
    # ground plane patch clipped to the world extent
    gx0 = max(box.min_corner[0], 0.0)
    gx1 = min(box.max_corner[0], world.params.extent[0])
    gy0 = max(box.min_corner[1], 0.0)
    gy1 = min(box.max_corner[1], world.params.extent[1])
    if gx1 > gx0 and gy1 > gy0 and box.min_corner[2] <= 0.0 <= box.max_corner[2]:
        n = rng.poisson(density * (gx1 - gx0) * (gy1 - gy0))
        if n:
            chunks.append(np.column_stack([
                rng.uniform(gx0, gx1, n), rng.uniform(gy0, gy1, n), np.zeros(n)
            ]))
    for b in world.boxes:
        half = b.size[:2] / 2
        if (np.abs(b.center - anchor[:2]) < half + spec.extent[0] / 2 + 1).all():
            chunks.append(_box_surface(rng, b, density))
    for c in world.cylinders:
        if (np.abs(c.center - anchor[:2]) < c.radius + spec.extent[0] / 2 + 1).all():
            chunks.append(_cylinder_surface(rng, c, density))
    if not chunks:
        raise EmptySubmap(f"no surface inside box at {anchor}")
    cloud = crop_aabb(PointCloud(np.concatenate(chunks), frame="world"), box)
    if len(cloud) == 0:
        raise EmptySubmap(f"no surface inside box at {anchor}")
    return voxel_downsample(cloud, voxel)


@dataclass(frozen=True)
class DegradeParams:
    keep_fraction: float = 0.35
    gaussian_noise_sigma: float = 0.05
    outlier_fraction: float = 0.03
    outlier_radius: float = 60.0
    density_bias: float = 1.0  # favors elevated structure, like VO features

    def __post_init__(self):
        if not (0 < self.keep_fraction <= 1):
            raise ValueError("keep_fraction must be in (0, 1]")
        if not (0 <= self.outlier_fraction < 1):
            raise ValueError("outlier_fraction must be in [0, 1)")


def degrade_to_visual(cloud: PointCloud, traj_positions: np.ndarray,
                      params: DegradeParams, rng: np.random.Generator):
    """Biased subsampling + Gaussian noise + injected uniform outliers.

    Returns (degraded cloud, injected-outlier mask). The mask marks the
    appended outlier rows."""
    pts = cloud.points
    n = pts.shape[0]
    n_keep = max(1, int(round(params.keep_fraction * n)))
    if n_keep < n:
        w = np.power(0.2 + np.abs(pts[:, 2] - pts[:, 2].min()), params.density_bias)
        w /= w.sum()
        keep = np.sort(rng.choice(n, size=n_keep, replace=False, p=w))
        kept = pts[keep]
    else:
        kept = pts.copy()
    if params.gaussian_noise_sigma > 0:
        kept = kept + rng.normal(0, params.gaussian_noise_sigma, kept.shape)
    n_out = int(round(params.outlier_fraction * kept.shape[0]))
    traj_positions = np.atleast_2d(np.asarray(traj_positions, dtype=np.float64))
    if n_out:
        centers = traj_positions[rng.integers(0, len(traj_positions), n_out)]
        direction = rng.normal(size=(n_out, 3))
        direction /= np.linalg.norm(direction, axis=1, keepdims=True)
        radii = params.outlier_radius * rng.uniform(0.2, 1.0, (n_out, 1))
        outliers = centers + direction * radii
        out_pts = np.concatenate([kept, outliers])
    else:
        out_pts = kept
    mask = np.zeros(out_pts.shape[0], dtype=bool)
    mask[kept.shape[0]:] = True
    return PointCloud(out_pts, frame=cloud.frame), mask


@dataclass(frozen=True)
class BenchmarkConfig:
    world: WorldParams = WorldParams()
    route_count: int = 4
    route_margin: float = 30.0
    route_spacing: float = 60.0
    lateral_offset: float = 2.0
    submap: SubmapSpec = SubmapSpec()
    degrade: DegradeParams = DegradeParams()
    seed: int = 0


@dataclass
class BenchmarkManifest:
    records: List[Tuple[str, str, str, np.ndarray]] = field(default_factory=list)
    # (kind, path, route_id, anchor xyz)

    def add(self, kind, path, route_id, anchor):
        self.records.append((kind, str(path), route_id,
                             np.asarray(anchor, dtype=np.float64).reshape(3)))

    def to_text(self, seed: int) -> str:
        lines = [f"# kind\tpath\troute\tax\tay\taz\tseed={seed}"]
        for kind, path, route_id, a in self.records:
            lines.append(
                f"{kind}\t{path}\t{route_id}\t{a[0]:.9g}\t{a[1]:.9g}\t{a[2]:.9g}"
            )
        return "\n".join(lines) + "\n"

    def save(self, path, seed: int):
        Path(path).write_text(self.to_text(seed))

    @classmethod
    def load(cls, path) -> "BenchmarkManifest":
        m = cls()
        for line in Path(path).read_text().splitlines():
            if line.startswith("#") or not line.strip():
                continue
            kind, p, route_id, ax, ay, az = line.split("\t")
            m.add(kind, p, route_id, (float(ax), float(ay), float(az)))
        return m

    def by_kind(self, kind: str):
        return [r for r in self.records if r[0] == kind]


def _route_polyline(config: BenchmarkConfig, index: int) -> np.ndarray:
    """Straight west-east route; queries retrace it with lateral offset."""
    y = config.route_margin + index * config.route_spacing
    x0 = config.route_margin
    x1 = config.world.extent[0] - config.route_margin
    xs = np.arange(x0, x1 + 1e-9, 2.0)
    return np.column_stack([xs, np.full_like(xs, y), np.zeros_like(xs)])


def make_benchmark(config: BenchmarkConfig, out_dir) -> BenchmarkManifest:
    """Write db submaps, query trajectories + degraded clouds, and a
    manifest with ground-truth anchors. Byte-identical under the seed."""
    out = Path(out_dir)
    (out / "db").mkdir(parents=True, exist_ok=True)
    (out / "queries").mkdir(parents=True, exist_ok=True)
    world = generate_world(config.world)
    manifest = BenchmarkManifest()
    stream = 0
    for r in range(config.route_count):
        route_id = f"r{r:02d}"
        polyline = _route_polyline(config, r)
        traj = Trajectory(
            np.arange(len(polyline), dtype=np.float64),
            polyline,
            np.tile([0.0, 0.0, 0.0, 1.0], (len(polyline), 1)),
        )
        anchors = trajectory_anchors(traj, config.submap.stride)
        for j, anchor in enumerate(anchors):
            stream += 1
            submap = sample_lidar_submap(world, anchor, config.submap, stream=stream)
            path = out / "db" / f"{route_id}_a{j:03d}.gpc"
            save_cloud(submap, path)
            manifest.add("db_submap", path.relative_to(out), route_id, anchor)

        # query route: same corridor, laterally offset, degraded
        qrng = _rng(config.seed, 3, r)
        offset = qrng.uniform(-config.lateral_offset, config.lateral_offset)
        qline = polyline + np.array([0.0, offset, 0.0])
        qline = qline + np.column_stack([
            np.zeros(len(qline)),
            0.5 * np.sin(qline[:, 0] / 17.0),
            np.zeros(len(qline)),
        ])
        qtraj = Trajectory(
            np.arange(len(qline), dtype=np.float64),
            qline,
            np.tile([0.0, 0.0, 0.0, 1.0], (len(qline), 1)),
        )
        qanchors = trajectory_anchors(qtraj, config.submap.stride)
        chunks = []
        for j, qa in enumerate(qanchors):
            stream += 1
            try:
                sub = sample_lidar_submap(world, qa, config.submap, stream=stream)
            except EmptySubmap:
                continue
            chunks.append(sub.points)
        vo_cloud = PointCloud(np.concatenate(chunks), frame="world")
        vo_cloud = voxel_downsample(vo_cloud, 0.1)
        degraded, _ = degrade_to_visual(vo_cloud, qline, config.degrade, qrng)
        cpath = out / "queries" / f"{route_id}.gpc"
        tpath = out / "queries" / f"{route_id}.traj"
        save_cloud(degraded, cpath)
        save_trajectory(qtraj, tpath)
        manifest.add("query_cloud", cpath.relative_to(out), route_id, qanchors[0])
        manifest.add("query_traj", tpath.relative_to(out), route_id, qanchors[0])
    manifest.save(out / "manifest.txt", config.seed)
    return manifest
