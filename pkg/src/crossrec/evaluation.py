"""Recall evaluation: ranking, HR/NDCG/MRR and per-scenario reports.

Each evaluated user contributes the ranks of their held-out targets inside
their candidate pool.  HR and MRR use the best (smallest) target rank; NDCG
sums over all relevant ranks and is normalised by the ideal DCG of that
user's relevant count.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .encoders import ItemFeatures, TwoTowerModel
from .events import SCENARIOS, Catalog, EvalSplit, Scenario, UserHistory, parse_scenario
from .mixer import MixQuota, build_batch, fuse_features, mix
from . import numerics as nx

KS = (10, 50, 100, 1000)

_SHORT = {Scenario.HOMEFEED: "Homefeed", Scenario.ADS: "Advertisements", Scenario.SEARCH: "Search"}


@dataclass(frozen=True)
class ScenarioConfig:
    inputs: frozenset
    target: Scenario

    def __post_init__(self):
        ins = frozenset(parse_scenario(s) for s in self.inputs)
        if not ins:
            raise ValueError("at least one input scenario is required")
        object.__setattr__(self, "inputs", ins)
        object.__setattr__(self, "target", parse_scenario(self.target))

    @classmethod
    def of(cls, inputs, target) -> "ScenarioConfig":
        return cls(frozenset(inputs), target)

    @property
    def label(self) -> str:
        names = [_SHORT[s] for s in sorted(self.inputs, key=lambda s: s.priority, reverse=True)]
        if len(self.inputs) == len(SCENARIOS):
            head = "All Scenarios"
        else:
            head = " + ".join(names)
        return f"{head} (for {_SHORT[self.target]})"


# ---------------------------------------------------------------------------
# ranking and metrics


def rank_candidates(scores: dict) -> list:
    """``[(item_id, rank), ...]`` by descending score, ties by ascending id."""
    vals = np.array(list(scores.values()), dtype=np.float64)
    if not np.isfinite(vals).all():
        raise ValueError("scores must be finite")
    ordered = sorted(scores.items(), key=lambda kv: (-kv[1], kv[0]))
    return [(k, i + 1) for i, (k, _) in enumerate(ordered)]


def target_ranks(scores: np.ndarray, ids, target_idx) -> np.ndarray:
    """Ranks of ``target_idx`` under :func:`rank_candidates` without a full sort."""
    ids = np.asarray(ids)
    out = np.empty(len(target_idx), dtype=np.int64)
    for n, t in enumerate(target_idx):
        st = scores[t]
        out[n] = 1 + int(np.count_nonzero(scores > st)) + int(np.count_nonzero((scores == st) & (ids < ids[t])))
    return out


def _check(per_user):
    if len(per_user) == 0:
        return None
    return [np.asarray(r, dtype=np.float64).reshape(-1) for r in per_user]


def hit_rate(per_user_ranks, k: int) -> float | None:
    """Mean over users of 1[min rank <= k]; ``None`` when there are no users."""
    rs = _check(per_user_ranks)
    if rs is None:
        return None
    return float(np.mean([float(r.min() <= k) for r in rs]))


def _dcg(ranks, k):
    return sum(1.0 / math.log2(r + 1) for r in sorted(ranks) if r <= k)


def ndcg(per_user_ranks, k: int) -> float | None:
    """Binary-relevance NDCG@k with IDCG over min(#relevant, k) positions."""
    rs = _check(per_user_ranks)
    if rs is None:
        return None
    vals = []
    for r in rs:
        ideal = sum(1.0 / math.log2(j + 2) for j in range(min(len(r), k)))
        vals.append(_dcg(r, k) / ideal)
    return float(np.mean(vals))


def mrr(per_user_ranks, k: int | None = None) -> float | None:
    """Mean of 1/first-relevant-rank, zero beyond ``k`` (uncapped when None)."""
    rs = _check(per_user_ranks)
    if rs is None:
        return None
    out = []
    for r in rs:
        first = r.min()
        out.append(0.0 if (k is not None and first > k) or not np.isfinite(first) else 1.0 / first)
    return float(np.mean(out))


@dataclass
class MetricsReport:
    label: str
    n_users: int
    n_skipped: int
    pool_size: int
    hr: dict = field(default_factory=dict)
    ndcg: dict = field(default_factory=dict)
    mrr: float | None = None

    @classmethod
    def from_ranks(cls, per_user_ranks, label="", n_skipped=0, pool_size=0, ks=KS) -> "MetricsReport":
        return cls(label, len(per_user_ranks), n_skipped, pool_size,
                   {k: hit_rate(per_user_ranks, k) for k in ks},
                   {k: ndcg(per_user_ranks, k) for k in ks},
                   mrr(per_user_ranks, max(ks)))

    def to_dict(self) -> dict:
        return {"label": self.label, "n_users": self.n_users, "n_skipped": self.n_skipped,
                "pool_size": self.pool_size,
                "hr": {str(k): v for k, v in self.hr.items()},
                "ndcg": {str(k): v for k, v in self.ndcg.items()},
                "mrr": self.mrr, "mrr_x100": None if self.mrr is None else 100.0 * self.mrr}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def row(self) -> list:
        def f(x):
            return "-" if x is None else f"{x:.4f}"
        cells = [f(self.hr[k]) for k in self.hr] + [f(self.ndcg[k]) for k in self.ndcg]
        return cells + ["-" if self.mrr is None else f"{100 * self.mrr:.3f}"]

    def header(self) -> list:
        return [f"HR@{k}" for k in self.hr] + [f"NDCG@{k}" for k in self.ndcg] + ["MRR*100"]


def format_table(rows, labels, header) -> str:
    """Aligned text table; ``rows`` are lists of already formatted cells."""
    cols = [["Setting"] + list(labels)] + [[h] + [r[i] for r in rows] for i, h in enumerate(header)]
    widths = [max(len(c) for c in col) for col in cols]
    lines = []
    for n in range(len(labels) + 1):
        cells = [col[n].ljust(w) if i == 0 else col[n].rjust(w) for i, (col, w) in enumerate(zip(cols, widths))]
        lines.append("  ".join(cells))
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# model evaluation


class EmbeddingCache:
    """Item embeddings by catalog row (keyed by item id through ``feats.index``),
    each computed at most once per model."""

    def __init__(self, model: TwoTowerModel, feats: ItemFeatures):
        self.model = model
        self.feats = feats
        self.row = feats.index
        self.vecs = np.zeros((len(feats.ids), model.item_cfg.d))
        self.done = np.zeros(len(feats.ids), dtype=bool)

    def ensure_rows(self, rows) -> None:
        rows = np.unique(np.asarray(rows, dtype=np.int64))
        missing = rows[~self.done[rows]]
        for lo in range(0, len(missing), 2048):
            chunk = missing[lo:lo + 2048]
            self.vecs[chunk] = self.model.item.encode_rows(self.feats, chunk).data
        self.done[missing] = True

    def ensure(self, ids) -> None:
        self.ensure_rows([self.row[i] for i in ids])

    def __call__(self, ids) -> np.ndarray:
        rows = np.array([self.row[i] for i in ids], dtype=np.int64)
        self.ensure_rows(rows)
        return self.vecs[rows]


def encode_users(model: TwoTowerModel, histories, t_currs, cache: EmbeddingCache,
                 quota: MixQuota | None = None, batch: int = 64) -> np.ndarray:
    """Interest sets (N, K, d) for histories mixed at reference times ``t_currs``."""
    ucfg = model.user_cfg
    quota = quota or MixQuota.scaled(ucfg.last_n)
    seqs = [mix(h, quota, model.strategy, t) for h, t in zip(histories, t_currs)]
    cache.ensure([e.event.item_id for s in seqs for e in s.entries])
    out = np.empty((len(seqs), ucfg.K, ucfg.d))
    E = nx.Tensor(cache.vecs)
    for lo in range(0, len(seqs), batch):
        chunk = seqs[lo:lo + batch]
        b = build_batch(chunk, cache.row, ucfg.action_channels, ucfg.last_n, ucfg.gap_buckets)
        fused = fuse_features(b, E, model.user.tables, model.strategy)
        out[lo:lo + len(chunk)] = model.user.forward(fused, b.valid).data
    return out


def check_compatible(model: TwoTowerModel, feats: ItemFeatures) -> None:
    if feats.tokens.max(initial=0) > model.item_cfg.vocab_size:
        raise ValueError("item tokens exceed the model vocabulary")
    vis = 0 if feats.visual is None else feats.visual.shape[1]
    if vis != model.item_cfg.visual_dim:
        raise ValueError(f"visual dim {vis} does not match model visual_dim {model.item_cfg.visual_dim}")


def evaluate(model: TwoTowerModel, splits, sc: ScenarioConfig, catalog: Catalog | None = None,
             feats: ItemFeatures | None = None, cache: EmbeddingCache | None = None,
             quota: MixQuota | None = None, ks=KS) -> MetricsReport:
    """Rank each user's held-out in-scenario targets within their candidate pool."""
    if cache is None:
        feats = feats or ItemFeatures.from_catalog(catalog, model.item_cfg)
        check_compatible(model, feats)
        cache = EmbeddingCache(model, feats)
    kept, skipped = [], 0
    for sp in splits:
        rel = [t for t, s in zip(sp.targets, sp.target_scenarios) if s == sc.target]
        if rel:
            kept.append((sp, np.array([cache.row[t] for t in dict.fromkeys(rel)], dtype=np.int64)))
        else:
            skipped += 1
    pool_size = len(kept[0][0].candidate_pool) if kept else 0
    if not kept:
        return MetricsReport.from_ranks([], sc.label, skipped, pool_size, ks)
    hists = [UserHistory.from_events(sp.user_id, [e for e in sp.input_events if e.scenario in sc.inputs])
             for sp, _ in kept]
    R = encode_users(model, hists, [sp.t_cut for sp, _ in kept], cache, quota)
    ids = np.asarray(cache.feats.ids)
    cache.ensure_rows(np.concatenate([np.asarray(sp.candidate_pool) for sp, _ in kept]))
    ranks = []
    for (sp, rel), interests in zip(kept, R):
        pool = np.asarray(sp.candidate_pool, dtype=np.int64)
        scores = (cache.vecs[pool] @ interests.T).max(axis=1)
        ranks.append(target_ranks(scores, ids[pool], np.flatnonzero(np.isin(pool, rel))))
    return MetricsReport.from_ranks(ranks, sc.label, skipped, pool_size, ks)
