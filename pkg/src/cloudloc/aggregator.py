"""Global feature aggregation: a learned per-set feature transform, two
latent cross-attention blocks (each one cross-attention plus four
self-attention layers over a small fixed latent array), and an MLP head
producing an L2-normalized global descriptor.

Attention cost is linear in the input point count: score matrices have
shape (latent_count, Nc), never (Nc, Nc).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Union

import numpy as np

from . import autodiff as ad
from .autodiff import ParamStore, Tensor, load_params, save_params
from .compressor import CompressedSubmap
from .errors import EmptyInput, ParseError
from .refine import QueryPointCloud


@dataclass(frozen=True)
class AggregatorConfig:
    input_dim: int = 6
    feature_dim: int = 256
    latent_count: int = 32
    descriptor_dim: int = 256
    blocks: int = 2
    self_layers_per_block: int = 4
    heads: int = 4
    lift_hidden: int = 64
    transform_hidden: int = 64
    head_hidden: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.feature_dim % self.heads != 0:
            raise ValueError("feature_dim must be divisible by heads")
        if self.latent_count < 1:
            raise ValueError("latent_count must be >= 1")

    def to_text(self) -> str:
        lines = [f"{k} = {getattr(self, k)}" for k in (
            "input_dim", "feature_dim", "latent_count", "descriptor_dim",
            "blocks", "self_layers_per_block", "heads", "lift_hidden",
            "transform_hidden", "head_hidden", "seed")]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "AggregatorConfig":
        kwargs = {}
        for lineno, line in enumerate(text.splitlines(), start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ParseError(f"expected 'key = value', got {line!r}", line=lineno)
            key, _, value = line.partition("=")
            kwargs[key.strip()] = int(value)
        return cls(**kwargs)


class AggregatorModel:
    """Parameter container; the forward pass lives in `aggregate_graph`."""

    def __init__(self, config: AggregatorConfig = AggregatorConfig(),
                 store: Optional[ParamStore] = None):
        self.config = config
        if store is not None:
            self.store = store
            return
        self.store = ParamStore()
        rng = np.random.default_rng(config.seed)
        d = config.feature_dim

        def dense(name, cin, cout, zero=False):
            s = 0.0 if zero else 1.0 / math.sqrt(cin)
            self.store.add(f"{name}.w", rng.uniform(-s, s, size=(cin, cout)))
            self.store.add(f"{name}.b", np.zeros(cout))

        dense("tnet.lift1", config.input_dim, config.lift_hidden)
        dense("tnet.lift2", config.lift_hidden, d)
        dense("tnet.trans1", d, config.transform_hidden)
        # transform predictor starts at the identity map
        self.store.add("tnet.trans2.w", np.zeros((config.transform_hidden, d * d)))
        self.store.add("tnet.trans2.b", np.eye(d).ravel())

        self.store.add("latents", rng.normal(0.0, 0.02, size=(config.latent_count, d)))
        for b in range(config.blocks):
            for layer in [f"block{b}.cross"] + [
                f"block{b}.self{i}" for i in range(config.self_layers_per_block)
            ]:
                for proj in ("wq", "wk", "wv", "wo"):
                    s = 1.0 / math.sqrt(d)
                    self.store.add(f"{layer}.{proj}", rng.uniform(-s, s, size=(d, d)))
                self.store.add(f"{layer}.ln_q.g", np.ones(d))
                self.store.add(f"{layer}.ln_q.b", np.zeros(d))
                self.store.add(f"{layer}.ln_kv.g", np.ones(d))
                self.store.add(f"{layer}.ln_kv.b", np.zeros(d))

        dense("head.fc1", d, config.head_hidden)
        dense("head.fc2", config.head_hidden, config.descriptor_dim)

    def head_param_names(self):
        """Parameters of the final MLP (the transfer-learning 10x group)."""
        return [n for n in self.store.names() if n.startswith("head.")]

    def set_head_lr_multiplier(self, mult: float):
        for name in self.store.names():
            self.store.set_lr_mult(name, mult if name.startswith("head.") else 1.0)

    def save(self, path) -> None:
        save_params(self.store, path)
        Path(str(path) + ".cfg").write_text(self.config.to_text())

    @classmethod
    def load(cls, path) -> "AggregatorModel":
        cfg_path = Path(str(path) + ".cfg")
        config = (AggregatorConfig.from_text(cfg_path.read_text())
                  if cfg_path.exists() else AggregatorConfig())
        return cls(config, store=load_params(path))


def _affine(store, name, x):
    return ad.add(ad.matmul(x, store[f"{name}.w"]), store[f"{name}.b"])


def _layer_norm(store, prefix, x):
    return ad.add(
        ad.mul(ad.layer_norm_lastdim(x), store[f"{prefix}.g"]), store[f"{prefix}.b"]
    )


def tnet_transform_graph(model: AggregatorModel, points: Tensor) -> Tensor:
    """Lift each input row to feature_dim, then multiply by a transform
    predicted from the max-pooled global code (identity at init)."""
    store = model.store
    d = model.config.feature_dim
    lifted = ad.relu(_affine(store, "tnet.lift2",
                             ad.relu(_affine(store, "tnet.lift1", points))))
    code = ad.reshape(ad.reduce_max_over_points(lifted), (1, -1))
    hidden = ad.relu(_affine(store, "tnet.trans1", code))
    flat = ad.add(ad.matmul(hidden, store["tnet.trans2.w"]), store["tnet.trans2.b"])
    transform = ad.reshape(flat, (d, d))
    return ad.matmul(lifted, transform)


def attention_graph(model: AggregatorModel, layer: str, queries: Tensor,
                    keys_values: Tensor) -> Tensor:
    """Pre-norm multi-head attention with residual: out = q + MHA(LN(q), LN(kv))."""
    store = model.store
    cfg = model.config
    dh = cfg.feature_dim // cfg.heads
    qn = _layer_norm(store, f"{layer}.ln_q", queries)
    kn = _layer_norm(store, f"{layer}.ln_kv", keys_values)
    q = ad.matmul(qn, store[f"{layer}.wq"])
    k = ad.matmul(kn, store[f"{layer}.wk"])
    v = ad.matmul(kn, store[f"{layer}.wv"])
    heads = []
    for h in range(cfg.heads):
        lo, hi = h * dh, (h + 1) * dh
        qh, kh, vh = (ad.slice_cols(t, lo, hi) for t in (q, k, v))
        scores = ad.scale(ad.matmul(qh, ad.transpose(kh)), 1.0 / math.sqrt(dh))
        heads.append(ad.matmul(ad.softmax_lastdim(scores), vh))
    mixed = ad.matmul(ad.concat(heads, axis=1), store[f"{layer}.wo"])
    return ad.add(queries, mixed)


def cross_attention_graph(model, block: int, latents, features):
    return attention_graph(model, f"block{block}.cross", latents, features)


def self_attention_graph(model, block: int, layer: int, latents):
    return attention_graph(model, f"block{block}.self{layer}", latents, latents)


def to_input_rows(item: Union[CompressedSubmap, QueryPointCloud, np.ndarray]) -> np.ndarray:
    """(N, 6) network input; query clouds get zero feature channels."""
    if isinstance(item, CompressedSubmap):
        return item.as_input()
    if isinstance(item, QueryPointCloud):
        pts = item.cloud.points
        return np.concatenate([pts, np.zeros_like(pts)], axis=1)
    rows = np.asarray(item, dtype=np.float64)
    if rows.ndim != 2 or rows.shape[1] != 6:
        raise ValueError(f"expected (N, 6) input rows, got {rows.shape}")
    return rows


def _rescale_rows(rows: np.ndarray) -> np.ndarray:
    """Map the xyz columns to [0,1] with one shared scalar so metric
    submaps and normalized query clouds share an input distribution."""
    pts = rows[:, :3]
    lo = pts.min(axis=0)
    span = (pts.max(axis=0) - lo).max()
    if span > 0:
        pts = (pts - lo) / span
    else:
        pts = pts - lo
    return np.concatenate([pts, rows[:, 3:]], axis=1)


def aggregate_graph(model: AggregatorModel, item) -> Tensor:
    """Differentiable descriptor: transform -> perceiver blocks -> MLP -> L2."""
    rows = to_input_rows(item)
    if rows.shape[0] == 0:
        raise EmptyInput("aggregate: empty point set")
    rows = _rescale_rows(rows)
    cfg = model.config
    features = tnet_transform_graph(model, Tensor(rows))
    latents = model.store["latents"]
    for b in range(cfg.blocks):
        latents = cross_attention_graph(model, b, latents, features)
        for i in range(cfg.self_layers_per_block):
            latents = self_attention_graph(model, b, i, latents)
    pooled = ad.mean_over_points(latents)
    hidden = ad.relu(_affine(model.store, "head.fc1", ad.reshape(pooled, (1, -1))))
    out = _affine(model.store, "head.fc2", hidden)
    return ad.l2_normalize(ad.reshape(out, (-1,)))


def aggregate(model: AggregatorModel, item) -> np.ndarray:
    """Global descriptor as a plain unit-norm vector."""
    return aggregate_graph(model, item).data.copy()
