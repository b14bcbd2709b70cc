"""End-to-end training of the two towers.

Per step, for a batch of users:

1. each user's history is cut at a random point, mixed, and its last W mixed
   rows become the supervision window (the first of them is the next item);
2. every item touched by the batch, plus a shared pool of sampled negatives,
   goes through the item tower once;
3. the user tower encodes the visible rows into K interests;
4. the next-item NCE uses the interest closest to the next item as anchor;
5. the window loss clusters the W targets, matches centroids to interests and
   applies the same NCE to every (matched interest, target) pair.

total = mean over users of (L_nce + lambda_w * L_window).
"""

from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .encoders import ItemFeatures, TwoTowerModel
from .events import Catalog, UserHistory
from .losses import TAU_MAX, TAU_MIN, plan_window, sample_negatives
from .mixer import MixedEntry, MixedSequence, MixQuota, MixStrategy, build_batch, fuse_features, mix

log = logging.getLogger(__name__)


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 3
    batch_size: int = 32
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    grad_accum: int = 1
    tau_init: float = 20.0
    negatives: int = 512
    clusters: int | None = None      # None -> K
    lambda_w: float = 1.0
    min_visible: int = 8
    random_cut: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.clusters is not None and self.clusters < 1:
            raise ValueError("clusters must be >= 1")
        if not TAU_MIN <= self.tau_init <= TAU_MAX:
            raise ValueError(f"tau_init must lie in [{TAU_MIN}, {TAU_MAX}]")
        if self.grad_accum < 1 or self.batch_size < 1:
            raise ValueError("batch_size and grad_accum must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        return cls(**{k: v for k, v in d.items() if k in cls.__dataclass_fields__})


@dataclass(frozen=True)
class TrainSample:
    user_id: str
    visible: MixedSequence
    window: tuple   # item ids, oldest first; window[0] is the next item

    @property
    def next_item(self) -> str:
        return self.window[0]


def rebase(seq: MixedSequence, t_curr: int) -> MixedSequence:
    return MixedSequence(tuple(MixedEntry(e.event, e.position, max(0, t_curr - e.event.timestamp))
                               for e in seq.entries), t_curr)


def make_sample(history: UserHistory, window: int, quota: MixQuota, strategy: MixStrategy,
                rng=None, min_visible: int = 8) -> TrainSample | None:
    """Cut, mix and split one history; ``None`` if it is too short.

    Time gaps of the visible rows are measured to the first window event,
    mirroring evaluation where they are measured to the cutoff.
    """
    timeline = history.timeline()
    lo = window + min_visible
    if len(timeline) < lo:
        return None
    end = len(timeline) if rng is None else int(rng.integers(lo, len(timeline) + 1))
    cut = UserHistory.from_events(history.user_id, timeline[:end])
    seq = mix(cut, quota, strategy)
    if len(seq) < window + 1:
        return None
    head = seq.entries[len(seq) - window]
    visible = rebase(seq.head(len(seq) - window), head.event.timestamp)
    win = tuple(e.event.item_id for e in seq.entries[len(seq) - window:])
    return TrainSample(history.user_id, visible, win)


@dataclass
class BatchOutput:
    loss: nx.Tensor
    nce: float
    window: float
    plans: list = field(default_factory=list)


def batch_loss(model: TwoTowerModel, samples, feats: ItemFeatures, neg_rows: np.ndarray,
               cfg: TrainConfig, rng=None, plans=None) -> BatchOutput:
    """Differentiable loss for a batch.

    ``plans`` fixes the per-user (target -> interest) routing and anchor
    choice, which is what finite-difference checks need; otherwise they are
    derived from the current embeddings with ``rng`` seeding the clustering.
    """
    B = len(samples)
    ucfg = model.user_cfg
    K = ucfg.K
    s = cfg.clusters or K
    cat_rows, local = [], {}

    def row_of(item_id):
        if item_id not in local:
            local[item_id] = len(cat_rows)
            cat_rows.append(feats.index[item_id])
        return local[item_id]

    for smp in samples:
        for e in smp.visible.entries:
            row_of(e.event.item_id)
        for it in smp.window:
            row_of(it)
    neg_local = np.array([row_of(feats.ids[r]) for r in neg_rows], dtype=np.int64)

    E = model.item.encode_rows(feats, np.array(cat_rows, dtype=np.int64))
    if ucfg.frozen_item_tower:
        E = nx.Tensor(E.data)
    batch = build_batch([smp.visible for smp in samples], local, ucfg.action_channels,
                        ucfg.last_n, ucfg.gap_buckets)
    fused = fuse_features(batch, E, model.user.tables, model.strategy)
    R = model.user.forward(fused, batch.valid)                 # (B, K, d)
    negs = nx.embedding_lookup(E, neg_local)

    next_rows = np.array([local[smp.next_item] for smp in samples], dtype=np.int64)
    P = nx.embedding_lookup(E, next_rows)
    if plans is None:
        best = np.einsum("bkd,bd->bk", R.data, P.data).argmax(axis=1)
    else:
        best = np.array([p["anchor"] for p in plans], dtype=np.int64)
    flatR = nx.reshape(R, (B * K, R.shape[2]))
    anchors = nx.embedding_lookup(flatR, np.arange(B) * K + best)
    nce = nx.info_nce(anchors, P, negs, model.tau)
    total = nx.sum_all(nce)
    nce_val = float(nce.data.sum())

    win_val = 0.0
    out_plans = []
    if cfg.lambda_w != 0.0:
        a_idx, t_idx, weights = [], [], []
        for b, smp in enumerate(samples):
            rows = np.array([local[it] for it in smp.window], dtype=np.int64)
            if plans is None:
                plan = plan_window(R.data[b], E.data[rows], s, rng)
                route = plan.interest_of_target
            else:
                route = np.asarray(plans[b]["route"])
            out_plans.append({"anchor": int(best[b]), "route": route.tolist()})
            w = len(rows)
            for i in np.flatnonzero(route >= 0):
                a_idx.append(b * K + route[i])
                t_idx.append(rows[i])
                weights.append(1.0 / w)
        if a_idx:
            wl = nx.info_nce(nx.embedding_lookup(flatR, np.array(a_idx)),
                             nx.embedding_lookup(E, np.array(t_idx)), negs, model.tau)
            wsum = nx.sum_all(nx.mul(wl, np.array(weights)))
            win_val = float(wsum.data)
            total = nx.add(total, nx.scale(wsum, cfg.lambda_w))
    else:
        out_plans = [{"anchor": int(b), "route": []} for b in best]
    loss = nx.scale(total, 1.0 / B)
    return BatchOutput(loss, nce_val / B, win_val / B, out_plans)


@dataclass
class TrainResult:
    model: TwoTowerModel
    steps: list          # per-step stats dicts
    epochs: list         # per-epoch stats dicts
    rejected_steps: int = 0

    def checkpoint_bytes(self) -> bytes:
        return self.model.to_bytes()


def train(histories, catalog: Catalog, model: TwoTowerModel, cfg: TrainConfig = TrainConfig(),
          quota: MixQuota | None = None, stats_stream=None, feats: ItemFeatures | None = None) -> TrainResult:
    """Train ``model`` in place on (already validated) histories."""
    histories = list(histories)
    if not histories:
        raise TrainingError("empty training set")
    ucfg = model.user_cfg
    quota = quota or MixQuota.scaled(ucfg.last_n)
    if quota.last_n != ucfg.last_n:
        raise ValueError(f"quota sums to {quota.last_n}, model expects last_n={ucfg.last_n}")
    feats = feats or ItemFeatures.from_catalog(catalog, model.item_cfg)
    model.tau.data = np.array(float(np.clip(cfg.tau_init, TAU_MIN, TAU_MAX)))
    opt = nx.Adam(model.trainable(), cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    n_items = len(feats.ids)
    step = 0
    steps, epochs = [], []
    t0 = time.perf_counter()
    for epoch in range(cfg.epochs):
        erng = np.random.default_rng([cfg.seed, 1, epoch])
        order = erng.permutation(len(histories))
        samples = []
        for i in order:
            smp = make_sample(histories[i], ucfg.window, quota, model.strategy,
                              erng if cfg.random_cut else None, cfg.min_visible)
            if smp is not None:
                samples.append(smp)
        if not samples:
            raise TrainingError("no history is long enough for the training window")
        losses = []
        opt.zero_grad()
        micro = 0
        for lo in range(0, len(samples), cfg.batch_size):
            chunk = samples[lo:lo + cfg.batch_size]
            srng = np.random.default_rng([cfg.seed, 2, step, micro])
            positives = {feats.index[it] for smp in chunk for it in smp.window}
            negs = sample_negatives(n_items, min(cfg.negatives, n_items - len(positives)), positives, srng)
            out = batch_loss(model, chunk, feats, negs.rows, cfg, srng)
            value = float(out.loss.data)
            if not np.isfinite(value):
                raise TrainingError(f"non-finite loss at epoch {epoch} step {step}: "
                                    f"nce={out.nce} window={out.window} tau={float(model.tau.data)}")
            out.loss.backward()
            micro += 1
            losses.append(value)
            if micro == cfg.grad_accum or lo + cfg.batch_size >= len(samples):
                opt.step(grad_scale=1.0 / micro)
                opt.zero_grad()
                np.clip(model.tau.data, TAU_MIN, TAU_MAX, out=model.tau.data)
                micro = 0
                rec = {"step": step, "epoch": epoch, "loss": value, "nce": out.nce,
                       "window": out.window, "tau": float(model.tau.data),
                       "wall": round(time.perf_counter() - t0, 3)}
                steps.append(rec)
                if stats_stream is not None:
                    stats_stream.write(json.dumps(rec) + "\n")
                step += 1
        ep = {"epoch": epoch, "loss": float(np.mean(losses)), "samples": len(samples),
              "tau": float(model.tau.data), "wall": round(time.perf_counter() - t0, 3)}
        epochs.append(ep)
        log.info("epoch %d loss %.4f tau %.2f (%.1fs)", epoch, ep["loss"], ep["tau"], ep["wall"])
    return TrainResult(model, steps, epochs, opt.rejected_steps)


def config_to_json(cfg) -> str:
    return json.dumps(asdict(cfg), sort_keys=True)
