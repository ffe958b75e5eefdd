"""Descriptor database, exact top-K Euclidean retrieval, and the
recall@1 / @5 / @1% evaluation with a 25 m success radius."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .errors import BadK, DuplicateId, EmptyInput, ParseError


@dataclass(frozen=True)
class DbEntry:
    id: str
    descriptor: np.ndarray
    centroid_world: np.ndarray

    def __post_init__(self):
        object.__setattr__(
            self, "descriptor", np.asarray(self.descriptor, dtype=np.float64).reshape(-1)
        )
        object.__setattr__(
            self, "centroid_world",
            np.asarray(self.centroid_world, dtype=np.float64).reshape(3),
        )


class DescriptorDatabase:
    """Immutable id -> (descriptor, centroid) store, insertion-ordered."""

    def __init__(self, ids: List[str], descriptors: np.ndarray,
                 centroids: np.ndarray):
        self.ids = list(ids)
        self.descriptors = np.asarray(descriptors, dtype=np.float64)
        self.centroids = np.asarray(centroids, dtype=np.float64)

    def __len__(self):
        return len(self.ids)

    @property
    def dim(self) -> int:
        return self.descriptors.shape[1]


def build_database(entries: Sequence[DbEntry]) -> DescriptorDatabase:
    if not entries:
        raise EmptyInput("build_database: no entries")
    seen = set()
    for e in entries:
        if e.id in seen:
            raise DuplicateId(f"duplicate database id {e.id!r}")
        seen.add(e.id)
    dims = {e.descriptor.shape[0] for e in entries}
    if len(dims) != 1:
        raise ValueError(f"descriptor dims not uniform: {sorted(dims)}")
    return DescriptorDatabase(
        [e.id for e in entries],
        np.stack([e.descriptor for e in entries]),
        np.stack([e.centroid_world for e in entries]),
    )


def query_topk(db: DescriptorDatabase, descriptor, k: int) -> List[Tuple[str, float]]:
    """Exact k smallest Euclidean distances, ascending; ties broken by
    insertion order."""
    if not (1 <= k <= len(db)):
        raise BadK(f"k={k} outside [1, {len(db)}]")
    q = np.asarray(descriptor, dtype=np.float64).reshape(-1)
    if q.shape[0] != db.dim:
        raise ValueError(f"descriptor dim {q.shape[0]} != db dim {db.dim}")
    d = np.linalg.norm(db.descriptors - q, axis=1)
    order = np.lexsort((np.arange(len(db)), d))[:k]
    return [(db.ids[i], float(d[i])) for i in order]


@dataclass
class EvalReport:
    recall_at: Dict[int, float]
    query_count: int
    db_count: int
    one_percent_k: int
    per_query_topk: List[List[str]] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"db_count\t{self.db_count}",
            f"query_count\t{self.query_count}",
            f"one_percent_k\t{self.one_percent_k}",
        ]
        for k in sorted(self.recall_at):
            lines.append(f"recall@{k}\t{self.recall_at[k]:.6f}")
        lines.append("# per-query top-K ids")
        for i, ids in enumerate(self.per_query_topk):
            lines.append(f"q{i}\t" + ",".join(ids))
        return "\n".join(lines) + "\n"


def one_percent_k(db_count: int) -> int:
    return max(1, math.ceil(0.01 * db_count))


def evaluate(db: DescriptorDatabase,
             queries: Sequence[Tuple[np.ndarray, np.ndarray]],
             ks: Sequence[int] = (1, 5),
             success_radius: float = 25.0) -> EvalReport:
    """A query counts at K iff any top-K entry centroid lies within the
    success radius of its true position. recall@1% uses ceil(0.01 * N)."""
    if len(db) == 0 or not queries:
        raise EmptyInput("evaluate: empty database or query set")
    if not ks:
        raise ValueError("ks must be nonempty")
    k1p = one_percent_k(len(db))
    all_ks = sorted(set(list(ks) + [k1p]))
    kmax = min(max(all_ks), len(db))
    hits = {k: 0 for k in all_ks}
    per_query = []
    for desc, true_pos in queries:
        top = query_topk(db, desc, kmax)
        ids = [t[0] for t in top]
        per_query.append(ids)
        centroid_idx = [db.ids.index(i) for i in ids]
        dists = np.linalg.norm(db.centroids[centroid_idx] - np.asarray(true_pos), axis=1)
        ok = dists <= success_radius
        for k in all_ks:
            if ok[: min(k, kmax)].any():
                hits[k] += 1
    n = len(queries)
    return EvalReport({k: hits[k] / n for k in all_ks}, n, len(db), k1p, per_query)


_DB_MAGIC = b"VDB1"


def save_database(db: DescriptorDatabase, path) -> None:
    with open(path, "wb") as f:
        f.write(_DB_MAGIC)
        f.write(struct.pack("<II", len(db), db.dim))
        for i, entry_id in enumerate(db.ids):
            eb = entry_id.encode("utf-8")
            f.write(struct.pack("<H", len(eb)))
            f.write(eb)
            f.write(db.descriptors[i].astype("<f4").tobytes())
            f.write(db.centroids[i].astype("<f8").tobytes())


def load_database(path) -> DescriptorDatabase:
    data = Path(path).read_bytes()
    if data[:4] != _DB_MAGIC:
        raise ParseError(f"bad magic {data[:4]!r}", byte_offset=0)
    count, dim = struct.unpack_from("<II", data, 4)
    off = 12
    ids, descs, cents = [], [], []
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", data, off)
        off += 2
        ids.append(data[off : off + nlen].decode("utf-8"))
        off += nlen
        descs.append(
            np.frombuffer(data, dtype="<f4", count=dim, offset=off).astype(np.float64)
        )
        off += 4 * dim
        cents.append(np.frombuffer(data, dtype="<f8", count=3, offset=off).copy())
        off += 24
    return DescriptorDatabase(ids, np.stack(descs), np.stack(cents))
