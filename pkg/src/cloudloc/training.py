"""Metric-learning machinery: lazy quadruplet losses with hardest-sample
mining, distance-constrained batch sampling (positives < 20 m, negatives
>= 50 m), and the pretrain / fine-tune schedule with a 10x learning rate
on the final MLP."""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from . import autodiff as ad
from .aggregator import AggregatorModel, aggregate, aggregate_graph
from .autodiff import Tensor
from .errors import InsufficientNegatives, TrainingDiverged
from .retrieval import DbEntry, build_database, evaluate


@dataclass(frozen=True)
class LossParams:
    alpha: float = 0.5
    beta: float = 0.2

    def __post_init__(self):
        if not (self.alpha > 0 and self.beta > 0):
            raise ValueError("margins must be positive and finite")


def mine_quadruplet(anchor: np.ndarray, positives: np.ndarray,
                    negatives: np.ndarray) -> Tuple[int, int, int]:
    """Hardest positive (max distance to anchor), hardest negative (min
    distance to anchor), and the remaining negative closest to the
    hardest negative."""
    d_pos = np.linalg.norm(positives - anchor, axis=1)
    d_neg = np.linalg.norm(negatives - anchor, axis=1)
    i_pos = int(np.argmax(d_pos))
    i_neg = int(np.argmin(d_neg))
    d_nn = np.linalg.norm(negatives - negatives[i_neg], axis=1)
    d_nn[i_neg] = np.inf
    i_second = int(np.argmin(d_nn))
    return i_pos, i_neg, i_second


def lazy_quadruplet(anchor, positives, negatives,
                    params: LossParams = LossParams()) -> float:
    """max(d(a, hardest_pos) - d(a, hardest_neg) + alpha, 0)
    + max(d(a, hardest_pos) - d(hardest_neg, second_neg) + beta, 0)."""
    anchor = np.asarray(anchor, dtype=np.float64)
    positives = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    negatives = np.atleast_2d(np.asarray(negatives, dtype=np.float64))
    if negatives.shape[0] < 2:
        raise InsufficientNegatives(
            f"need >= 2 negatives, got {negatives.shape[0]}"
        )
    i_pos, i_neg, i_second = mine_quadruplet(anchor, positives, negatives)
    d_pos = np.linalg.norm(positives[i_pos] - anchor)
    d_neg = np.linalg.norm(negatives[i_neg] - anchor)
    d_second = np.linalg.norm(negatives[i_neg] - negatives[i_second])
    return float(
        max(d_pos - d_neg + params.alpha, 0.0)
        + max(d_pos - d_second + params.beta, 0.0)
    )


def lazy_quadruplet_graph(anchor: Tensor, positives: Sequence[Tensor],
                          negatives: Sequence[Tensor],
                          params: LossParams = LossParams()) -> Tensor:
    """Differentiable loss; mining runs on the current values and the
    hinges are built only over the selected samples."""
    if len(negatives) < 2:
        raise InsufficientNegatives(f"need >= 2 negatives, got {len(negatives)}")
    pos_vals = np.stack([p.data for p in positives])
    neg_vals = np.stack([n.data for n in negatives])
    i_pos, i_neg, i_second = mine_quadruplet(anchor.data, pos_vals, neg_vals)
    d_pos = ad.euclidean_distance(anchor, positives[i_pos])
    d_neg = ad.euclidean_distance(anchor, negatives[i_neg])
    d_second = ad.euclidean_distance(negatives[i_neg], negatives[i_second])
    first = ad.hinge(ad.add(ad.sub(d_pos, d_neg), Tensor(params.alpha)))
    second = ad.hinge(ad.add(ad.sub(d_pos, d_second), Tensor(params.beta)))
    return ad.add(first, second)


@dataclass
class QuadrupletBatch:
    """Descriptor sets for the combined loss; the v_* sets hold the
    query-side counterparts of the same places."""

    anchor: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    v_positives: Optional[np.ndarray] = None
    v_negatives: Optional[np.ndarray] = None


def combined_loss(batch: QuadrupletBatch, params: LossParams = LossParams(),
                  pretrain: bool = False) -> float:
    """Database-side loss plus the same loss over query-side descriptors;
    pretraining uses the database-side term only."""
    total = lazy_quadruplet(batch.anchor, batch.positives, batch.negatives, params)
    if pretrain:
        return total
    if batch.v_positives is None or batch.v_negatives is None:
        raise ValueError("combined loss needs the query-side descriptor sets")
    return total + lazy_quadruplet(
        batch.anchor, batch.v_positives, batch.v_negatives, params
    )


@dataclass(frozen=True)
class PlaceRecord:
    place_id: str
    position: np.ndarray  # world frame anchor
    db_rows: np.ndarray  # (Nc, 6) aggregation input of the map submap
    qpc_rows: Optional[np.ndarray] = None  # (M, 6) query-side input


class PlaceDataset:
    """Places with map-side inputs and (optionally) query-side inputs,
    plus the distance predicates for sampling."""

    def __init__(self, places: Sequence[PlaceRecord],
                 positive_radius: float = 20.0, negative_radius: float = 50.0):
        self.places = list(places)
        self.positive_radius = positive_radius
        self.negative_radius = negative_radius
        pos = np.stack([p.position for p in self.places])
        self._dist = np.linalg.norm(pos[:, None, :] - pos[None, :, :], axis=2)

    def __len__(self):
        return len(self.places)

    def eligible_positives(self, i: int) -> np.ndarray:
        mask = self._dist[i] < self.positive_radius
        mask[i] = False
        return np.nonzero(mask)[0]

    def eligible_negatives(self, i: int) -> np.ndarray:
        return np.nonzero(self._dist[i] >= self.negative_radius)[0]

    def query_indices(self) -> np.ndarray:
        return np.array(
            [i for i, p in enumerate(self.places) if p.qpc_rows is not None],
            dtype=np.int64,
        )


@dataclass
class SampledBatch:
    anchor_index: int
    positive_indices: np.ndarray
    negative_indices: np.ndarray


@dataclass
class SkippedAnchor:
    anchor_index: int
    reason: str


def sample_batch(dataset: PlaceDataset, rng: np.random.Generator,
                 anchor_index: int, positives: int = 2, negatives: int = 8,
                 include_self_positive: bool = True):
    """Positives strictly within the positive radius of the anchor place,
    negatives at or beyond the negative radius. Returns a SampledBatch or
    a SkippedAnchor when the predicates cannot be met."""
    pos_pool = list(dataset.eligible_positives(anchor_index))
    if include_self_positive:
        pos_pool = [anchor_index] + pos_pool
    neg_pool = dataset.eligible_negatives(anchor_index)
    if not pos_pool:
        return SkippedAnchor(anchor_index, "no eligible positives")
    if len(neg_pool) < 2:
        return SkippedAnchor(anchor_index, "fewer than 2 eligible negatives")
    pos_pick = rng.choice(len(pos_pool), size=min(positives, len(pos_pool)),
                          replace=False)
    neg_pick = rng.choice(len(neg_pool), size=min(max(negatives, 2), len(neg_pool)),
                          replace=False)
    return SampledBatch(
        anchor_index,
        np.array([pos_pool[i] for i in pos_pick]),
        neg_pool[neg_pick],
    )


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "finetune"  # pretrain | finetune
    base_lr: float = 1e-3
    epochs: int = 10
    positives_per_anchor: int = 2
    negatives_per_anchor: int = 8
    seed: int = 0
    loss: LossParams = LossParams()
    val_fraction: float = 0.1
    head_lr_multiplier: float = 10.0
    combined: bool = True  # fine-tune with the query-side term as well
    feature_dropout: float = 0.0  # chance of blanking a map input's feature channels
    augment_point_keep: float = 1.0  # fraction of rows kept per presentation
    augment_jitter: float = 0.0  # xyz noise as a fraction of the input's bbox span
    hard_negatives: int = 0  # per anchor, globally mined from refreshed descriptors

    def __post_init__(self):
        if self.mode not in ("pretrain", "finetune"):
            raise ValueError(f"mode must be pretrain|finetune, got {self.mode!r}")


def split_places(dataset: PlaceDataset, val_fraction: float, seed: int):
    """Deterministic held-out split by place index."""
    rng = np.random.default_rng(seed)
    n = len(dataset)
    order = rng.permutation(n)
    n_val = max(1, int(round(val_fraction * n))) if val_fraction > 0 else 0
    val = np.sort(order[:n_val])
    train = np.sort(order[n_val:])
    return train, val


def validation_recall_at_1(model: AggregatorModel, dataset: PlaceDataset,
                           val_indices: np.ndarray) -> float:
    entries = [
        DbEntry(p.place_id, aggregate(model, p.db_rows), p.position)
        for p in dataset.places
    ]
    db = build_database(entries)
    queries = []
    for i in val_indices:
        p = dataset.places[i]
        if p.qpc_rows is not None:
            queries.append((aggregate(model, p.qpc_rows), p.position))
    if not queries:
        return float("nan")
    return evaluate(db, queries, ks=(1,)).recall_at[1]


def _augment_rows(rows: np.ndarray, config: TrainConfig,
                  rng: Optional[np.random.Generator]) -> np.ndarray:
    """Random point dropout and bbox-relative xyz jitter, applied per
    presentation so each place is never seen twice identically."""
    if rng is None:
        return rows
    if config.augment_point_keep < 1.0 and len(rows) > 16:
        keep = max(16, int(round(config.augment_point_keep * len(rows))))
        rows = rows[rng.choice(len(rows), size=keep, replace=False)]
    if config.augment_jitter > 0.0:
        span = float((rows[:, :3].max(axis=0) - rows[:, :3].min(axis=0)).max())
        rows = rows.copy()
        rows[:, :3] += rng.normal(scale=config.augment_jitter * span,
                                  size=(len(rows), 3))
    return rows


def _db_rows(place: PlaceRecord, config: TrainConfig,
             rng: Optional[np.random.Generator]) -> np.ndarray:
    """Map-side input rows, with the feature channels occasionally blanked
    so the descriptor cannot rely on channels the query side lacks."""
    rows = place.db_rows
    if rng is not None and config.feature_dropout > 0.0 \
            and rng.random() < config.feature_dropout:
        rows = rows.copy()
        rows[:, 3:] = 0.0
    return _augment_rows(rows, config, rng)


def _qpc_rows(place: PlaceRecord, config: TrainConfig,
              rng: Optional[np.random.Generator]) -> np.ndarray:
    return _augment_rows(place.qpc_rows, config, rng)


def _batch_loss_graph(model: AggregatorModel, dataset: PlaceDataset,
                      batch: SampledBatch, config: TrainConfig,
                      rng: Optional[np.random.Generator] = None) -> Optional[Tensor]:
    places = dataset.places
    if config.mode == "pretrain":
        anchor = aggregate_graph(model, _db_rows(places[batch.anchor_index], config, rng))
        pos = [aggregate_graph(model, _db_rows(places[i], config, rng))
               for i in batch.positive_indices]
        neg = [aggregate_graph(model, _db_rows(places[i], config, rng))
               for i in batch.negative_indices]
        return lazy_quadruplet_graph(anchor, pos, neg, config.loss)
    anchor_place = places[batch.anchor_index]
    if anchor_place.qpc_rows is None:
        return None
    anchor = aggregate_graph(model, _qpc_rows(anchor_place, config, rng))
    pos = [aggregate_graph(model, _db_rows(places[i], config, rng))
           for i in batch.positive_indices]
    neg = [aggregate_graph(model, _db_rows(places[i], config, rng))
           for i in batch.negative_indices]
    loss = lazy_quadruplet_graph(anchor, pos, neg, config.loss)
    if not config.combined:
        return loss
    v_pos = [aggregate_graph(model, _qpc_rows(places[i], config, rng))
             for i in batch.positive_indices if places[i].qpc_rows is not None]
    v_neg = [aggregate_graph(model, _qpc_rows(places[i], config, rng))
             for i in batch.negative_indices if places[i].qpc_rows is not None]
    if v_pos and len(v_neg) >= 2:
        loss = ad.add(loss, lazy_quadruplet_graph(anchor, v_pos, v_neg, config.loss))
    return loss


def _hard_negative_pool(model: AggregatorModel, dataset: PlaceDataset,
                        anchor_indices: np.ndarray, config: TrainConfig):
    """For each anchor, the eligible negatives whose current descriptors sit
    closest to the anchor's — the entries a retrieval would wrongly rank
    first. Refreshed from a full forward pass, no gradients involved."""
    descs = np.stack([aggregate(model, p.db_rows) for p in dataset.places])
    pool = {}
    for i in anchor_indices:
        i = int(i)
        p = dataset.places[i]
        rows = (p.qpc_rows if config.mode == "finetune"
                and p.qpc_rows is not None else p.db_rows)
        anchor = aggregate(model, rows)
        eligible = dataset.eligible_negatives(i)
        if len(eligible) == 0:
            continue
        order = np.argsort(np.linalg.norm(descs[eligible] - anchor, axis=1))
        pool[i] = eligible[order[:config.hard_negatives]]
    return pool


def _with_hard_negatives(batch: SampledBatch, hard) -> SampledBatch:
    """Replace the head of the sampled negatives with mined ones, keeping
    the batch size and the random tail."""
    if hard is None or len(hard) == 0:
        return batch
    tail = [i for i in batch.negative_indices if i not in set(map(int, hard))]
    merged = np.array(list(hard) + tail, dtype=np.int64)
    keep = max(len(batch.negative_indices), 2)
    return SampledBatch(batch.anchor_index, batch.positive_indices, merged[:keep])


@dataclass
class TrainResult:
    epoch_losses: List[float] = field(default_factory=list)
    val_recall: List[float] = field(default_factory=list)
    skipped: List[SkippedAnchor] = field(default_factory=list)
    log_lines: List[str] = field(default_factory=list)


def run_training(model: AggregatorModel, dataset: PlaceDataset,
                 config: TrainConfig = TrainConfig(),
                 train_indices: Optional[np.ndarray] = None,
                 val_indices: Optional[np.ndarray] = None,
                 log_path=None) -> TrainResult:
    """Optimize the aggregator with Adam. Pretraining anchors on map-side
    descriptors with the database loss only; fine-tuning anchors on
    query clouds with the combined loss and a 10x head learning rate."""
    if train_indices is None or val_indices is None:
        train_indices, val_indices = split_places(
            dataset, config.val_fraction, config.seed
        )
    if config.mode == "finetune":
        model.set_head_lr_multiplier(config.head_lr_multiplier)
    else:
        model.set_head_lr_multiplier(1.0)
    anchors = train_indices
    if config.mode == "finetune":
        has_qpc = {int(i) for i in dataset.query_indices()}
        anchors = np.array([i for i in train_indices if int(i) in has_qpc],
                           dtype=np.int64)
    rng = np.random.default_rng(config.seed)
    result = TrainResult()
    for epoch in range(config.epochs):
        t0 = time.monotonic()
        hard_pool = (_hard_negative_pool(model, dataset, anchors, config)
                     if config.hard_negatives > 0 else None)
        order = rng.permutation(len(anchors))
        losses = []
        for j in order:
            batch = sample_batch(
                dataset, rng, int(anchors[j]),
                config.positives_per_anchor, config.negatives_per_anchor,
            )
            if isinstance(batch, SkippedAnchor):
                result.skipped.append(batch)
                continue
            if hard_pool is not None:
                batch = _with_hard_negatives(batch, hard_pool.get(int(anchors[j])))
            loss = _batch_loss_graph(model, dataset, batch, config, rng)
            if loss is None:
                continue
            value = loss.item()
            if not np.isfinite(value):
                raise TrainingDiverged(f"loss became {value}")
            losses.append(value)
            if value > 0.0:
                model.store.zero_grad()
                loss.backward()
                ad.adam_step(model.store, config.base_lr)
        mean_loss = float(np.mean(losses)) if losses else 0.0
        recall = validation_recall_at_1(model, dataset, val_indices)
        wall = time.monotonic() - t0
        result.epoch_losses.append(mean_loss)
        result.val_recall.append(recall)
        result.log_lines.append(
            f"{epoch}\t{config.mode}\t{mean_loss:.6f}\t{recall:.4f}\t{wall:.1f}"
        )
    if log_path is not None:
        with open(log_path, "w") as f:
            f.write("epoch\tmode\tmean_loss\tval_recall@1\twall_seconds\n")
            for line in result.log_lines:
                f.write(line + "\n")
    return result
