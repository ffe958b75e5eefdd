"""Geometry-preserving point-cloud compressor.

Three kernel-point-convolution blocks, each followed by voxel-grid
downsampling (0.1 / 0.5 / 1.0 m by default), project a raw submap of N
points to Nc surviving points with a 3-dim learned feature each. A
simplified per-point expansion decoder reconstructs geometry so that
reversibility can be trained and measured with the Chamfer distance.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import List, Optional, Tuple

import numpy as np
from scipy import sparse
from scipy.spatial import cKDTree

from . import autodiff as ad
from .autodiff import ParamStore, Tensor
from .core import PointCloud, voxel_downsample
from .errors import EmptyInput, ParseError, TrainingDiverged


def kernel_point_pattern(count: int, radius: float) -> np.ndarray:
    """Deterministic kernel layout: one center point plus a Fibonacci
    sphere shell at 0.75 * radius."""
    if count < 1:
        raise ValueError("kernel point count must be >= 1")
    pts = np.zeros((count, 3))
    m = count - 1
    if m:
        i = np.arange(m)
        golden = math.pi * (3.0 - math.sqrt(5.0))
        z = 1.0 - 2.0 * (i + 0.5) / m
        r = np.sqrt(np.maximum(0.0, 1.0 - z * z))
        theta = golden * i
        shell = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
        pts[1:] = 0.75 * radius * shell
    return pts


@dataclass(frozen=True)
class KpconvParams:
    """Rigid kernel-point convolution with linear influence
    h(y, x_k) = max(0, 1 - |y - x_k| / sigma)."""

    kernel_points: np.ndarray  # (K, 3) offsets
    sigma: float
    weights: List[np.ndarray]  # K matrices, each (Cin, Cout)

    def __post_init__(self):
        kp = np.asarray(self.kernel_points, dtype=np.float64)
        if np.max(np.linalg.norm(kp, axis=1)) > self.sigma + 1e-12:
            raise ValueError("kernel point offsets must have norm <= sigma")
        shapes = {w.shape for w in self.weights}
        if len(self.weights) != kp.shape[0] or len(shapes) != 1:
            raise ValueError("need one equally-shaped weight matrix per kernel point")
        object.__setattr__(self, "kernel_points", kp)


def influence_matrices(points: np.ndarray, kernel_points: np.ndarray,
                       sigma: float, neighbor_radius: float):
    """Per-kernel-point sparse (N, N) matrices of influence coefficients
    over the radius neighborhood graph (self always included).

    Only entries with nonzero influence are materialized: the influence
    of kernel point x_k on the pair (i, j) is positive exactly when p_j
    lies within sigma of p_i + x_k, so a single shifted radius query per
    kernel point finds them all without enumerating the full
    neighborhood graph.
    """
    n = points.shape[0]
    tree = cKDTree(points)
    mats = []
    for xk in kernel_points:
        shifted = cKDTree(points + xk)
        d = shifted.sparse_distance_matrix(tree, sigma, output_type="coo_matrix")
        rows, cols = d.row, d.col
        h = 1.0 - d.data / sigma
        if np.linalg.norm(xk) + sigma > neighbor_radius:
            # a nonzero-influence pair may fall outside the neighborhood
            # ball for off-center kernel points; enforce the ball exactly
            keep = (
                np.linalg.norm(points[cols] - points[rows], axis=1)
                <= neighbor_radius
            )
            rows, cols, h = rows[keep], cols[keep], h[keep]
        mats.append(sparse.csr_matrix((h, (rows, cols)), shape=(n, n)))
    return mats


def kpconv_forward(cloud: PointCloud, params: KpconvParams,
                   neighbor_radius: float) -> np.ndarray:
    """f'_i = sum over in-ball j and kernel points k of
    h(p_j - p_i, x_k) * f_j @ W_k. Linear in the input features."""
    if neighbor_radius <= 0:
        raise ValueError("neighbor_radius must be > 0")
    if len(cloud) == 0:
        raise EmptyInput("kpconv_forward: empty cloud")
    feats = cloud.features
    if feats is None:
        feats = np.ones((len(cloud), 1))
    mats = influence_matrices(cloud.points, params.kernel_points,
                              params.sigma, neighbor_radius)
    out = np.zeros((len(cloud), params.weights[0].shape[1]))
    for s, w in zip(mats, params.weights):
        out += s @ (feats @ w)
    return out


@dataclass(frozen=True)
class CompressorConfig:
    grid_sizes: Tuple[float, ...] = (0.1, 0.5, 1.0)
    radius_factor: float = 2.5
    kernel_point_count: int = 15
    feature_dims: Tuple[int, ...] = (1, 16, 32, 32)
    head_dim: int = 3
    decoder_factors: Tuple[int, ...] = (2, 2, 2, 2)
    decoder_feature_dim: int = 16
    offset_clamp: float = math.sqrt(3.0)
    seed: int = 0

    def __post_init__(self):
        if len(self.feature_dims) != len(self.grid_sizes) + 1:
            raise ValueError("feature_dims must have one entry per block plus input")


@dataclass(frozen=True)
class CompressedSubmap:
    points: np.ndarray  # (Nc, 3), submap-local meters
    features: np.ndarray  # (Nc, 3), learned
    source_id: str = ""
    centroid_world: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        feats = np.asarray(self.features, dtype=np.float64).reshape(-1, 3)
        if pts.shape[0] < 1 or feats.shape[0] != pts.shape[0]:
            raise ValueError("compressed submap needs Nc >= 1 with 3-dim features")
        object.__setattr__(self, "points", pts)
        object.__setattr__(self, "features", feats)
        object.__setattr__(
            self, "centroid_world",
            np.asarray(self.centroid_world, dtype=np.float64).reshape(3),
        )

    @property
    def point_count(self) -> int:
        return self.points.shape[0]

    def as_input(self) -> np.ndarray:
        """(Nc, 6) xyz + feature rows for the aggregation network."""
        return np.concatenate([self.points, self.features], axis=1)


class CompressorModel:
    """Encoder (3 conv+pool blocks, linear head) and expansion decoder."""

    def __init__(self, config: CompressorConfig = CompressorConfig()):
        self.config = config
        self.store = ParamStore()
        self.frozen = False
        rng = np.random.default_rng(config.seed)

        def uniform(shape):
            s = 1.0 / math.sqrt(shape[0])
            return rng.uniform(-s, s, size=shape)

        dims = config.feature_dims
        for b in range(len(config.grid_sizes)):
            for k in range(config.kernel_point_count):
                self.store.add(f"enc{b}.w{k}", uniform((dims[b], dims[b + 1])))
        self.store.add("head.w", uniform((dims[-1], config.head_dim)))
        self.store.add("head.b", np.zeros(config.head_dim))

        dec_dims = [config.head_dim] + [config.decoder_feature_dim] * (
            len(config.decoder_factors) - 1
        )
        for j, factor in enumerate(config.decoder_factors):
            cin = dec_dims[j]
            self.store.add(f"dec{j}.w_off", uniform((cin, factor * 3)))
            self.store.add(f"dec{j}.b_off", np.zeros(factor * 3))
            if j < len(config.decoder_factors) - 1:
                cout = dec_dims[j + 1]
                self.store.add(f"dec{j}.w_feat", uniform((cin, factor * cout)))
                self.store.add(f"dec{j}.b_feat", np.zeros(factor * cout))

    def kpconv_params(self, block: int) -> KpconvParams:
        cfg = self.config
        sigma = cfg.grid_sizes[block]
        return KpconvParams(
            kernel_point_pattern(cfg.kernel_point_count, sigma),
            sigma,
            [self.store[f"enc{block}.w{k}"].data
             for k in range(cfg.kernel_point_count)],
        )

    def save(self, path) -> None:
        save_compressor_weights(self.store, path)

    @classmethod
    def load(cls, path, config: CompressorConfig = CompressorConfig()):
        model = cls(config)
        loaded = load_compressor_weights(path)
        if set(loaded) != set(model.store.names()):
            raise ParseError("weight file does not match compressor layout")
        for name, arr in loaded.items():
            if model.store[name].data.shape != arr.shape:
                raise ParseError(f"tensor {name!r} has wrong shape {arr.shape}")
            model.store[name].data = arr
        return model


@dataclass
class EncodeGeometry:
    """Weight-independent geometry of one cloud's encoder cascade."""

    stage_points: List[np.ndarray]
    conv_mats: List[List[sparse.csr_matrix]]
    pool_mats: List[sparse.csr_matrix]
    final_points: np.ndarray


def _voxel_pool_matrix(points: np.ndarray, cell: float, origin: np.ndarray):
    keys = np.floor((points - origin) / cell).astype(np.int64)
    uniq, inverse = np.unique(keys, axis=0, return_inverse=True)
    inverse = inverse.ravel()
    m = uniq.shape[0]
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    weights = 1.0 / counts[inverse]
    pool = sparse.csr_matrix(
        (weights, (inverse, np.arange(points.shape[0]))), shape=(m, points.shape[0])
    )
    centroids = np.asarray(pool @ points)
    return centroids, pool


def prepare_encode_geometry(model: CompressorModel, cloud: PointCloud) -> EncodeGeometry:
    if len(cloud) == 0:
        raise EmptyInput("encode: empty cloud")
    cfg = model.config
    pts = cloud.points
    # one grid frame for the whole cascade: the raw cloud's min corner
    origin = pts.min(axis=0)
    stage_points, conv_mats, pool_mats = [], [], []
    for b, grid in enumerate(cfg.grid_sizes):
        stage_points.append(pts)
        kp = kernel_point_pattern(cfg.kernel_point_count, grid)
        conv_mats.append(
            influence_matrices(pts, kp, grid, cfg.radius_factor * grid)
        )
        pts, pool = _voxel_pool_matrix(pts, grid, origin)
        pool_mats.append(pool)
    return EncodeGeometry(stage_points, conv_mats, pool_mats, pts)


def encode_features_graph(model: CompressorModel, geom: EncodeGeometry) -> Tensor:
    """Differentiable feature path of the encoder over fixed geometry."""
    cfg = model.config
    feats = Tensor(np.ones((geom.stage_points[0].shape[0], 1)))
    for b in range(len(cfg.grid_sizes)):
        terms = [
            ad.matmul(ad.sparse_matmul(s, feats), model.store[f"enc{b}.w{k}"])
            for k, s in enumerate(geom.conv_mats[b])
        ]
        acc = terms[0]
        for t in terms[1:]:
            acc = ad.add(acc, t)
        feats = ad.sparse_matmul(geom.pool_mats[b], ad.relu(acc))
    return ad.add(ad.matmul(feats, model.store["head.w"]), model.store["head.b"])


def encode(model: CompressorModel, cloud: PointCloud, source_id: str = "",
           centroid_world=None) -> CompressedSubmap:
    """Compress a submap to Nc points, each with a 3-dim learned feature.

    Nc equals the occupied-voxel count of the final grid stage."""
    geom = prepare_encode_geometry(model, cloud)
    feats = encode_features_graph(model, geom)
    if centroid_world is None:
        centroid_world = cloud.points.mean(axis=0)
    return CompressedSubmap(geom.final_points, feats.data, source_id, centroid_world)


def decode_positions_graph(model: CompressorModel, points: np.ndarray,
                           features: Tensor) -> Tensor:
    """Differentiable decoder: each point expands by the per-block factor,
    children land at parent + learned offset (norm-clamped)."""
    cfg = model.config
    pos = Tensor(np.asarray(points, dtype=np.float64))
    feats = features
    last = len(cfg.decoder_factors) - 1
    for j, factor in enumerate(cfg.decoder_factors):
        m = pos.shape[0]
        raw = ad.add(
            ad.matmul(feats, model.store[f"dec{j}.w_off"]),
            model.store[f"dec{j}.b_off"],
        )
        offsets = ad.clamp_row_norm(
            ad.reshape(raw, (m * factor, 3)), cfg.offset_clamp
        )
        pos = ad.add(ad.repeat_rows(pos, factor), offsets)
        if j < last:
            nxt = ad.add(
                ad.matmul(feats, model.store[f"dec{j}.w_feat"]),
                model.store[f"dec{j}.b_feat"],
            )
            cout = nxt.shape[1] // factor
            feats = ad.relu(ad.reshape(nxt, (m * factor, cout)))
    return pos


def decode(model: CompressorModel, compressed: CompressedSubmap) -> PointCloud:
    pos = decode_positions_graph(model, compressed.points, Tensor(compressed.features))
    return PointCloud(pos.data, None, "local")


def reconstruction_loss_graph(model: CompressorModel, geom: EncodeGeometry,
                              target: np.ndarray) -> Tensor:
    feats = encode_features_graph(model, geom)
    pos = decode_positions_graph(model, geom.final_points, feats)
    return ad.chamfer_to(pos, target)


def chamfer_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Symmetric mean nearest-neighbor distance between two point sets."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    da, _ = cKDTree(b).query(a)
    db, _ = cKDTree(a).query(b)
    return float(da.mean() + db.mean())


@dataclass(frozen=True)
class AutoencoderTrainConfig:
    epochs: int = 30
    lr: float = 5e-3
    seed: int = 0
    max_target_points: int = 4000


def train_autoencoder(model: CompressorModel, clouds: List[PointCloud],
                      config: AutoencoderTrainConfig = AutoencoderTrainConfig()):
    """Minimize the symmetric Chamfer distance of decode(encode(cloud)).

    Returns (model, per-epoch mean losses); the encoder is frozen after
    training. Zero epochs leaves the weights untouched."""
    if len(clouds) < 2:
        raise ValueError("need at least 2 training clouds")
    rng = np.random.default_rng(config.seed)
    prepared = []
    for cloud in clouds:
        geom = prepare_encode_geometry(model, cloud)
        target = cloud.points
        if target.shape[0] > config.max_target_points:
            sel = rng.choice(target.shape[0], config.max_target_points, replace=False)
            target = target[np.sort(sel)]
        prepared.append((geom, target))
    history = []
    for _ in range(config.epochs):
        losses = []
        for geom, target in prepared:
            model.store.zero_grad()
            loss = reconstruction_loss_graph(model, geom, target)
            if not np.isfinite(loss.item()):
                raise TrainingDiverged(f"chamfer loss became {loss.item()}")
            loss.backward()
            ad.adam_step(model.store, config.lr)
            losses.append(loss.item())
        history.append(float(np.mean(losses)))
    model.frozen = True
    return model, history


def compression_ratio(original: PointCloud, compressed: CompressedSubmap) -> float:
    """Raw scalar-count ratio (N * 3) / (Nc * 6)."""
    if len(original) == 0 or compressed.point_count == 0:
        raise EmptyInput("compression_ratio: empty input")
    return (len(original) * 3.0) / (compressed.point_count * 6.0)


_WEIGHTS_MAGIC = b"GPCW"
_WEIGHTS_VERSION = 1
_SUBMAP_MAGIC = b"GPCC"


def save_compressor_weights(store: ParamStore, path) -> None:
    with open(path, "wb") as f:
        f.write(_WEIGHTS_MAGIC)
        f.write(struct.pack("<II", _WEIGHTS_VERSION, len(store.params)))
        for name, t in store.params.items():
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", t.data.ndim))
            for d in t.data.shape:
                f.write(struct.pack("<I", d))
            f.write(t.data.astype("<f4").tobytes())


def load_compressor_weights(path) -> dict:
    data = Path(path).read_bytes()
    if data[:4] != _WEIGHTS_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}", byte_offset=0)
    version, count = struct.unpack_from("<II", data, 4)
    if version != _WEIGHTS_VERSION:
        raise ParseError(f"unsupported weights version {version}", byte_offset=4)
    off = 12
    out = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        name = data[off : off + nlen].decode("utf-8")
        off += nlen
        (rank,) = struct.unpack_from("<B", data, off)
        off += 1
        shape = struct.unpack_from(f"<{rank}I", data, off) if rank else ()
        off += 4 * rank
        n = int(np.prod(shape)) if rank else 1
        out[name] = (
            np.frombuffer(data, dtype="<f4", count=n, offset=off)
            .reshape(shape)
            .astype(np.float64)
        )
        off += 4 * n
    return out


def save_compressed_submap(sub: CompressedSubmap, path) -> None:
    with open(path, "wb") as f:
        f.write(_SUBMAP_MAGIC)
        f.write(struct.pack("<I", sub.point_count))
        f.write(sub.as_input().astype("<f4").tobytes())
        sid = sub.source_id.encode("utf-8")
        f.write(struct.pack("<H", len(sid)))
        f.write(sid)
        f.write(sub.centroid_world.astype("<f8").tobytes())


def load_compressed_submap(path) -> CompressedSubmap:
    data = Path(path).read_bytes()
    if data[:4] != _SUBMAP_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}", byte_offset=0)
    (count,) = struct.unpack_from("<I", data, 4)
    off = 8
    rows = np.frombuffer(data, dtype="<f4", count=count * 6, offset=off)
    rows = rows.reshape(count, 6).astype(np.float64)
    off += count * 24
    (slen,) = struct.unpack_from("<H", data, off)
    off += 2
    source_id = data[off : off + slen].decode("utf-8")
    off += slen
    centroid = np.frombuffer(data, dtype="<f8", count=3, offset=off)
    return CompressedSubmap(rows[:, :3], rows[:, 3:], source_id, centroid)
