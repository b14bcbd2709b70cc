"""Two-dimensional dense mixing of cross-scenario histories.

A history is truncated per scenario to its quota of most recent events, the
three lists are merged chronologically with their scenario tags, and every
entry receives a sequence index and a time gap to a reference time.  The user
encoder input row for an entry is the sum

    item_vec + action_embed + hour_embed + scenario_embed + PE_seq(j) + PE_gap(bucket(gap))

where ``action_embed`` sums the embeddings of the active action flags and the
two positional terms are switched on or off by the mixing strategy.

``is_hide`` stands in for the "block" action.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from . import numerics as nx
from .events import FLAG_BIT, SCENARIOS, Scenario, UserHistory, merge_timeline

DEFAULT_CHANNELS = ("is_collect", "is_share", "is_message", "is_hide", "is_like")
GAP_BUCKETS = 32
GAP_BASE_S = 60.0


class MixStrategy(str, Enum):
    SORTED_BY_TIMESTAMP = "sorted_by_timestamp"
    NAIVE = "naive"
    PE_SEQ_ONLY = "pe_seq_only"
    PE_GAP_ONLY = "pe_gap_only"
    TWO_D = "2d"

    @property
    def uses_quota(self) -> bool:
        return self is not MixStrategy.SORTED_BY_TIMESTAMP

    @property
    def uses_seq(self) -> bool:
        return self in (MixStrategy.SORTED_BY_TIMESTAMP, MixStrategy.PE_SEQ_ONLY, MixStrategy.TWO_D)

    @property
    def uses_gap(self) -> bool:
        return self in (MixStrategy.SORTED_BY_TIMESTAMP, MixStrategy.PE_GAP_ONLY, MixStrategy.TWO_D)

    @property
    def label(self) -> str:
        return _LABELS[self]


_LABELS = {
    MixStrategy.SORTED_BY_TIMESTAMP: "Sorted by Timestamp",
    MixStrategy.NAIVE: "Naive Combination",
    MixStrategy.PE_SEQ_ONLY: "1D (on position)",
    MixStrategy.PE_GAP_ONLY: "1D (on timestamp)",
    MixStrategy.TWO_D: "2D-Mixing",
}


@dataclass(frozen=True)
class MixQuota:
    n_h: int = 96
    n_a: int = 16
    n_s: int = 16

    def __post_init__(self):
        if min(self.n_h, self.n_a, self.n_s) < 0:
            raise ValueError("quotas must be non-negative")

    @property
    def last_n(self) -> int:
        return self.n_h + self.n_a + self.n_s

    def for_scenario(self, s: Scenario) -> int:
        return {Scenario.HOMEFEED: self.n_h, Scenario.ADS: self.n_a, Scenario.SEARCH: self.n_s}[s]

    @classmethod
    def scaled(cls, last_n: int) -> "MixQuota":
        """Keep the 96/16/16 proportions for another sequence budget."""
        n_a = n_s = last_n // 8
        return cls(last_n - n_a - n_s, n_a, n_s)


@dataclass(frozen=True)
class MixedEntry:
    event: object
    position: int
    gap: int

    @property
    def scenario(self) -> Scenario:
        return self.event.scenario


@dataclass(frozen=True)
class MixedSequence:
    entries: tuple
    t_curr: int

    def __len__(self):
        return len(self.entries)

    def counts(self) -> dict:
        out = {s: 0 for s in SCENARIOS}
        for e in self.entries:
            out[e.scenario] += 1
        return out

    def head(self, n: int) -> "MixedSequence":
        return MixedSequence(self.entries[:n], self.t_curr)


def apply_quota(history: UserHistory, q: MixQuota) -> dict:
    out = {}
    for s in SCENARIOS:
        n = q.for_scenario(s)
        evs = history[s]
        out[s] = tuple(evs[max(0, len(evs) - n):]) if n else ()
    return out


def merge(lists, t_curr: int | None = None) -> MixedSequence:
    """Chronological merge; ``lists`` is a scenario mapping or a sequence of lists.

    Exact timestamp ties fall back to homefeed < ads < search, then input order.
    ``t_curr`` defaults to one second after the latest event.
    """
    parts = lists.values() if isinstance(lists, dict) else lists
    events = merge_timeline(ev for part in parts for ev in part)
    if t_curr is None:
        t_curr = (events[-1].timestamp + 1) if events else 0
    entries = tuple(MixedEntry(ev, j, max(0, t_curr - ev.timestamp)) for j, ev in enumerate(events))
    return MixedSequence(entries, t_curr)


def mix(history: UserHistory, quota: MixQuota = MixQuota(),
        strategy: MixStrategy = MixStrategy.TWO_D, t_curr: int | None = None) -> MixedSequence:
    """Select and order a history for the user encoder under ``strategy``."""
    strategy = MixStrategy(strategy)
    if strategy.uses_quota:
        return merge(apply_quota(history, quota), t_curr)
    timeline = history.timeline()
    return merge([timeline[max(0, len(timeline) - quota.last_n):]], t_curr)


def gap_bucket(dt, n_buckets: int = GAP_BUCKETS) -> int:
    """min(G-1, floor(log2(1 + dt/60)))."""
    return min(n_buckets - 1, int(math.floor(math.log2(1.0 + dt / GAP_BASE_S))))


def hour_of(ts: int) -> int:
    return (int(ts) // 3600) % 24


class MixerTables:
    """Learned feature tables consumed by the fusion step."""

    def __init__(self, d: int, last_n: int, rng, channels=DEFAULT_CHANNELS,
                 n_gap_buckets: int = GAP_BUCKETS, prefix: str = "mixer"):
        self.channels = tuple(channels)
        for c in self.channels:
            if c not in FLAG_BIT:
                raise ValueError(f"unknown action channel {c!r}")
        self.d, self.last_n, self.n_gap_buckets = d, last_n, n_gap_buckets
        # side features start small next to the unit-norm item content
        init = lambda shape: nx.uniform_init(rng, shape, d, gain=0.1)  # noqa: E731
        self.action = nx.Parameter(init((len(self.channels), d)), f"{prefix}.action")
        self.hour = nx.Parameter(init((24, d)), f"{prefix}.hour")
        self.scenario = nx.Parameter(init((len(SCENARIOS), d)), f"{prefix}.scenario")
        self.pos_seq = nx.Parameter(init((last_n, d)), f"{prefix}.pos_seq")
        self.pos_gap = nx.Parameter(init((n_gap_buckets, d)), f"{prefix}.pos_gap")

    def parameters(self) -> list:
        return [self.action, self.hour, self.scenario, self.pos_seq, self.pos_gap]


@dataclass
class SequenceBatch:
    """Padded integer/flag arrays for a batch of mixed sequences."""

    item_rows: np.ndarray    # (B, L) rows into an item-embedding matrix
    flags: np.ndarray        # (B, L, C) 0/1 over the action channels
    hours: np.ndarray        # (B, L)
    scenarios: np.ndarray    # (B, L)
    positions: np.ndarray    # (B, L)
    gap_buckets: np.ndarray  # (B, L)
    valid: np.ndarray        # (B, L) bool

    @property
    def lengths(self) -> np.ndarray:
        return self.valid.sum(axis=1)


def build_batch(seqs, item_row, channels=DEFAULT_CHANNELS, last_n: int | None = None,
                n_gap_buckets: int = GAP_BUCKETS) -> SequenceBatch:
    """Pack mixed sequences; ``item_row`` maps an item id to its embedding row."""
    B = len(seqs)
    L = max(1, max((len(s) for s in seqs), default=1))
    bits = np.array([FLAG_BIT[c] for c in channels], dtype=np.int64)
    shape = (B, L)
    item_rows = np.zeros(shape, np.int64)
    flags = np.zeros((B, L, len(channels)))
    hours = np.zeros(shape, np.int64)
    scen = np.zeros(shape, np.int64)
    pos = np.zeros(shape, np.int64)
    gaps = np.zeros(shape, np.int64)
    valid = np.zeros(shape, bool)
    for b, seq in enumerate(seqs):
        n = len(seq)
        if n == 0:
            continue
        if last_n is not None and seq.entries[-1].position >= last_n:
            raise ValueError(f"sequence position {seq.entries[-1].position} exceeds last_n={last_n}")
        item_rows[b, :n] = [item_row[e.event.item_id] for e in seq.entries]
        raw = np.array([e.event.flags for e in seq.entries], dtype=np.int64)
        flags[b, :n] = (raw[:, None] >> bits) & 1
        hours[b, :n] = [hour_of(e.event.timestamp) for e in seq.entries]
        scen[b, :n] = [e.scenario.priority for e in seq.entries]
        pos[b, :n] = [e.position for e in seq.entries]
        gaps[b, :n] = [gap_bucket(e.gap, n_gap_buckets) for e in seq.entries]
        valid[b, :n] = True
    return SequenceBatch(item_rows, flags, hours, scen, pos, gaps, valid)


def encode_positions(batch: SequenceBatch, tables: MixerTables,
                     strategy: MixStrategy = MixStrategy.TWO_D):
    """PE_seq(j) + PE_gap(bucket) per row, restricted to the terms ``strategy`` uses.

    Returns ``None`` when the strategy uses neither term.
    """
    strategy = MixStrategy(strategy)
    if batch.positions.size and batch.positions.max() >= tables.last_n:
        raise ValueError(f"sequence position {batch.positions.max()} exceeds last_n={tables.last_n}")
    out = None
    if strategy.uses_seq:
        out = nx.embedding_lookup(tables.pos_seq, batch.positions)
    if strategy.uses_gap:
        g = nx.embedding_lookup(tables.pos_gap, batch.gap_buckets)
        out = g if out is None else nx.add(out, g)
    return out


def fuse_features(batch: SequenceBatch, item_vecs: nx.Tensor, tables: MixerTables,
                  strategy: MixStrategy = MixStrategy.TWO_D, parts=None) -> nx.Tensor:
    """Sum content, action, hour, scenario and positional terms into (B, L, d).

    ``parts`` optionally names which terms to include (used by ablations and
    the additivity checks); by default all terms are summed.
    """
    parts = set(parts or ("item", "action", "hour", "scenario", "position"))
    terms = []
    if "item" in parts:
        terms.append(nx.embedding_lookup(item_vecs, batch.item_rows))
    if "action" in parts:
        terms.append(nx.matmul(nx.Tensor(batch.flags), tables.action))
    if "hour" in parts:
        terms.append(nx.embedding_lookup(tables.hour, batch.hours))
    if "scenario" in parts:
        terms.append(nx.embedding_lookup(tables.scenario, batch.scenarios))
    if "position" in parts:
        pe = encode_positions(batch, tables, strategy)
        if pe is not None:
            terms.append(pe)
    if not terms:
        B, L = batch.valid.shape
        return nx.Tensor(np.zeros((B, L, tables.d)))
    out = terms[0]
    for t in terms[1:]:
        out = nx.add(out, t)
    return out
