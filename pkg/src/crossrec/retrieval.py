"""Recall stage: a precomputed item-embedding index, exact top-k and a throughput bench.

Index file layout (all little-endian)::

    b"REDX" | u16 version | u64 M | u32 d | 32-byte model hash | i64 timestamp
    | M x (u16 byte length, utf-8 id) | M*d f32 row-major payload

Rows are stored as 32-bit floats; scores are accumulated in 64 bits.
"""

from __future__ import annotations

import json
import logging
import struct
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .encoders import ItemFeatures, TwoTowerModel
from .evaluation import EmbeddingCache, encode_users
from .events import Catalog
from .mixer import MixQuota

log = logging.getLogger(__name__)

MAGIC = b"REDX"
VERSION = 1
_HEAD = struct.Struct("<4sHQI32sq")


class IndexFormatError(ValueError):
    """Malformed index input or file."""


class ItemIndex:
    """Immutable id table plus unit-norm f32 embedding rows."""

    def __init__(self, ids, emb, model_hash: bytes = b"\0" * 32, timestamp: int = 0):
        ids = [str(i) for i in ids]
        seen, dups = set(), []
        for i in ids:
            if i in seen:
                dups.append(i)
            seen.add(i)
        if dups:
            raise IndexFormatError(f"duplicate item ids: {sorted(set(dups))}")
        emb = np.asarray(emb)
        if emb.ndim != 2 or emb.shape[0] != len(ids):
            raise IndexFormatError(f"embedding shape {emb.shape} does not match {len(ids)} ids")
        if len(model_hash) != 32:
            raise IndexFormatError("model hash must be 32 bytes")
        self.ids = np.array(ids, dtype=object)
        self.emb = np.array(emb, dtype="<f4", order="C")
        self.emb.flags.writeable = False
        self.model_hash = bytes(model_hash)
        self.timestamp = int(timestamp)
        e64 = self.emb.astype(np.float64)
        self._e64 = e64
        self._inv_norm = 1.0 / np.linalg.norm(e64, axis=1)
        # position of every row in ascending-id order, for tie breaking
        self._id_rank = np.empty(len(ids), dtype=np.int64)
        self._id_rank[np.argsort(np.array(ids, dtype=str), kind="stable")] = np.arange(len(ids))

    def __len__(self) -> int:
        return len(self.ids)

    @property
    def d(self) -> int:
        return self.emb.shape[1]

    def to_bytes(self) -> bytes:
        parts = [_HEAD.pack(MAGIC, VERSION, len(self), self.d, self.model_hash, self.timestamp)]
        for i in self.ids:
            b = i.encode("utf-8")
            if len(b) > 0xFFFF:
                raise IndexFormatError(f"item id too long: {i[:32]}...")
            parts.append(struct.pack("<H", len(b)) + b)
        parts.append(self.emb.tobytes())
        return b"".join(parts)

    @classmethod
    def from_bytes(cls, raw: bytes) -> "ItemIndex":
        if len(raw) < _HEAD.size:
            raise IndexFormatError("truncated index header")
        magic, ver, M, d, mh, ts = _HEAD.unpack_from(raw, 0)
        if magic != MAGIC:
            raise IndexFormatError(f"bad magic {magic!r}")
        if ver != VERSION:
            raise IndexFormatError(f"unsupported index version {ver}")
        off, ids = _HEAD.size, []
        for _ in range(M):
            if off + 2 > len(raw):
                raise IndexFormatError("truncated id table")
            (n,) = struct.unpack_from("<H", raw, off)
            ids.append(raw[off + 2:off + 2 + n].decode("utf-8"))
            off += 2 + n
        if len(raw) - off != M * d * 4:
            raise IndexFormatError(f"payload is {len(raw) - off} bytes, expected {M * d * 4}")
        emb = np.frombuffer(raw, dtype="<f4", offset=off).reshape(M, d)
        return cls(ids, emb, mh, ts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ItemIndex":
        return cls.from_bytes(Path(path).read_bytes())

    def scores(self, interests: np.ndarray, rows=None) -> np.ndarray:
        """Max cosine over interests for every row (or the given rows)."""
        q = np.atleast_2d(np.asarray(interests, dtype=np.float64))
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        if rows is None:
            return (self._e64 @ q.T).max(axis=1) * self._inv_norm
        return (self._e64[rows] @ q.T).max(axis=1) * self._inv_norm[rows]


def build_index(model: TwoTowerModel, items, timestamp: int = 0) -> ItemIndex:
    """Embed every item once with the item tower.

    ``items`` is a :class:`Catalog` or :class:`ItemFeatures`.  The timestamp is
    caller supplied so identical inputs give byte-identical files.
    """
    if isinstance(items, Catalog):
        dup = len(items.ids) - len(set(items.ids.tolist()))
        if dup:
            raise IndexFormatError(f"catalog has {dup} duplicate ids")
        items = ItemFeatures.from_catalog(items, model.item_cfg)
    vis = 0 if items.visual is None else items.visual.shape[1]
    if vis != model.item_cfg.visual_dim:
        raise IndexFormatError(f"visual dim {vis} does not match model visual_dim {model.item_cfg.visual_dim}")
    emb = model.item.encode_all(items)
    return ItemIndex(items.ids.tolist(), emb, model.model_hash(), timestamp)


def _rank(index: ItemIndex, scores: np.ndarray, rows: np.ndarray, k: int):
    if k < len(rows):
        part = np.argpartition(-scores, k - 1)[:k]
        kth = scores[part].min()
        keep = np.flatnonzero(scores >= kth)
    else:
        keep = np.arange(len(rows))
    order = np.lexsort((index._id_rank[rows[keep]], -scores[keep]))[:k]
    return keep[order]


def topk(index: ItemIndex, interests: np.ndarray, k: int, workers: int = 1, chunk: int = 65536) -> list:
    """Exact top-k ``[(item_id, score), ...]`` by max cosine, ties by ascending id.

    ``k`` above the index size is clamped with a warning.  The scan may be
    split over row chunks and threads; each row's score does not depend on
    the split.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    M = len(index)
    if k > M:
        log.warning("k=%d exceeds index size %d; clamping", k, M)
        k = M
    bounds = [(lo, min(M, lo + chunk)) for lo in range(0, M, chunk)]

    def scan(b):
        rows = np.arange(*b)
        s = index.scores(interests, rows)
        pick = _rank(index, s, rows, k)
        return rows[pick], s[pick]

    if workers > 1 and len(bounds) > 1:
        with ThreadPoolExecutor(workers) as ex:
            parts = list(ex.map(scan, bounds))
    else:
        parts = [scan(b) for b in bounds]
    rows = np.concatenate([p[0] for p in parts])
    s = np.concatenate([p[1] for p in parts])
    pick = _rank(index, s, rows, k)
    return [(index.ids[r], float(v)) for r, v in zip(rows[pick], s[pick])]


# ---------------------------------------------------------------------------
# throughput


@dataclass(frozen=True)
class BenchConfig:
    iterations: int = 10
    warmup: int = 3
    k: int = 100
    workers: int = 1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("bench needs at least one timed iteration")
        if self.warmup < 0 or self.workers < 1 or self.k < 1:
            raise ValueError("warmup >= 0, workers >= 1 and k >= 1 are required")


@dataclass
class ThroughputReport:
    batch_size: int
    d: int
    K: int
    layers: int
    encode_sps: float
    retrieve_sps: float
    total_sps: float
    p50_ms: float
    p95_ms: float
    p99_ms: float
    iterations: int

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)


def bench(model: TwoTowerModel, index: ItemIndex, histories, t_currs, feats: ItemFeatures,
          cfg: BenchConfig = BenchConfig(), quota: MixQuota | None = None) -> ThroughputReport:
    """Time user encoding and retrieval for one batch of users.

    Item embeddings of history items are computed before timing, matching a
    serving path that reads them from the index.  Workers each take a slice
    of the batch; their timings are merged per iteration by the slowest one.
    """
    histories, t_currs = list(histories), list(t_currs)
    B = len(histories)
    if B == 0:
        raise ValueError("bench needs at least one user")
    cache = EmbeddingCache(model, feats)
    cache.ensure([e.item_id for h in histories for e in h.timeline()])
    slices = [s for s in np.array_split(np.arange(B), min(cfg.workers, B)) if len(s)]

    def run(sl):
        t0 = time.perf_counter()
        R = encode_users(model, [histories[i] for i in sl], [t_currs[i] for i in sl], cache, quota)
        t1 = time.perf_counter()
        lat = []
        for r in R:
            a = time.perf_counter()
            topk(index, r, min(cfg.k, len(index)))
            lat.append(time.perf_counter() - a)
        t2 = time.perf_counter()
        return t1 - t0, t2 - t1, lat

    enc, ret, lats = 0.0, 0.0, []
    with ThreadPoolExecutor(len(slices)) as ex:
        for it in range(cfg.warmup + cfg.iterations):
            outs = list(ex.map(run, slices))
            if it < cfg.warmup:
                continue
            enc += max(o[0] for o in outs)
            ret += max(o[1] for o in outs)
            for o in outs:
                lats.extend(o[2])
    per_user = np.array(lats) * 1e3
    n = B * cfg.iterations
    p50, p95, p99 = np.percentile(per_user, [50, 95, 99])
    return ThroughputReport(B, model.user_cfg.d, model.user_cfg.K, model.user_cfg.layers,
                            n / enc, n / ret, n / (enc + ret),
                            float(p50), float(p95), float(p99), cfg.iterations)
