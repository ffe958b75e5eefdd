"""End-to-end wiring: benchmark artifacts -> compressed database ->
refined query clouds -> place dataset -> descriptors -> evaluation.
Shared by the command-line front end and the acceptance suite."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional

import numpy as np

from .aggregator import AggregatorModel, aggregate
from .compressor import (
    AutoencoderTrainConfig,
    CompressedSubmap,
    CompressorModel,
    encode,
    train_autoencoder,
)
from .core import PointCloud, voxel_downsample
from .errors import NoValidSegments
from .io import load_cloud
from .refine import (
    DensifyParams,
    FilterParams,
    RefineWarnings,
    SubmapSpec,
    build_qpc,
    load_trajectory,
)
from .retrieval import DbEntry, DescriptorDatabase, build_database, evaluate
from .synth import BenchmarkManifest
from .training import PlaceDataset, PlaceRecord


@dataclass
class DbItem:
    id: str
    route: str
    anchor: np.ndarray
    compressed: CompressedSubmap


@dataclass
class QueryItem:
    id: str
    route: str
    anchor: np.ndarray
    rows: np.ndarray  # (M, 6) aggregation input


def load_db_clouds(bench_dir, manifest: BenchmarkManifest):
    out = []
    for kind, path, route, anchor in manifest.by_kind("db_submap"):
        cloud = load_cloud(Path(bench_dir) / path)
        # submap-local frame centered on the anchor
        local = PointCloud(cloud.points - anchor, frame="local")
        out.append((Path(path).stem, route, anchor, local))
    return out


def encode_db(bench_dir, manifest: BenchmarkManifest,
              model: CompressorModel) -> List[DbItem]:
    items = []
    for sid, route, anchor, local in load_db_clouds(bench_dir, manifest):
        compressed = encode(model, local, source_id=sid, centroid_world=anchor)
        items.append(DbItem(sid, route, anchor, compressed))
    return items


def train_compressor_on_benchmark(bench_dir, manifest: BenchmarkManifest,
                                  config: AutoencoderTrainConfig,
                                  max_clouds: int = 20,
                                  model: Optional[CompressorModel] = None):
    clouds = [c for _, _, _, c in load_db_clouds(bench_dir, manifest)[:max_clouds]]
    if model is None:
        model = CompressorModel()
    return train_autoencoder(model, clouds, config)


def qpc_rows(cloud: PointCloud, thin_cell: float = 0.0) -> np.ndarray:
    """Zero-padded (M, 6) aggregation input for a normalized query cloud,
    optionally thinned by a voxel grid to bound aggregation cost."""
    if thin_cell > 0 and len(cloud) > 1:
        cloud = voxel_downsample(cloud, thin_cell)
    pts = cloud.points
    return np.concatenate([pts, np.zeros_like(pts)], axis=1)


def refine_queries(bench_dir, manifest: BenchmarkManifest,
                   spec: SubmapSpec = SubmapSpec(),
                   filter_params: FilterParams = FilterParams(),
                   densify_params: DensifyParams = DensifyParams(),
                   thin_cell: float = 0.025,
                   warnings: Optional[RefineWarnings] = None) -> List[QueryItem]:
    items = []
    trajs = {r[2]: r for r in manifest.by_kind("query_traj")}
    for kind, path, route, _ in manifest.by_kind("query_cloud"):
        cloud = load_cloud(Path(bench_dir) / path)
        traj = load_trajectory(Path(bench_dir) / trajs[route][1])
        try:
            qpcs = build_qpc(traj, cloud, spec, filter_params, densify_params,
                             source_vo=route, warnings=warnings)
        except NoValidSegments:
            continue
        for j, qpc in enumerate(qpcs):
            items.append(QueryItem(
                f"{route}_q{j:03d}", route, qpc.anchor_world,
                qpc_rows(qpc.cloud, thin_cell),
            ))
    return items


def build_place_dataset(db_items: List[DbItem], query_items: List[QueryItem],
                        positive_radius: float = 20.0,
                        negative_radius: float = 50.0) -> PlaceDataset:
    """One place per database submap; each query segment attaches to its
    nearest database anchor (within the positive radius)."""
    anchors = np.stack([d.anchor for d in db_items])
    qpc_for_place = {}
    for q in query_items:
        dists = np.linalg.norm(anchors - q.anchor, axis=1)
        i = int(np.argmin(dists))
        if dists[i] < positive_radius and i not in qpc_for_place:
            qpc_for_place[i] = q.rows
    places = [
        PlaceRecord(d.id, d.anchor, d.compressed.as_input(), qpc_for_place.get(i))
        for i, d in enumerate(db_items)
    ]
    return PlaceDataset(places, positive_radius, negative_radius)


def build_descriptor_database(model: AggregatorModel,
                              db_items: List[DbItem]) -> DescriptorDatabase:
    entries = [
        DbEntry(d.id, aggregate(model, d.compressed), d.anchor) for d in db_items
    ]
    return build_database(entries)


def evaluate_queries(model: AggregatorModel, db: DescriptorDatabase,
                     query_items: List[QueryItem], ks=(1, 5),
                     success_radius: float = 25.0):
    queries = [(aggregate(model, q.rows), q.anchor) for q in query_items]
    return evaluate(db, queries, ks=ks, success_radius=success_radius)
