"""Cross-scenario behaviour logs: schema, parsing, validation, synthesis, splits.

Records are newline-delimited JSON, one user per line::

    {"user_id": "...", "data": {"homefeed_item_lastn": [...],
                                "ads_item_lastn": [...],
                                "search_item_lastn": [...]}}

and each event carries ``item_id``, ``timestamp``, ``duration``, ``type``,
``page_key`` and the twelve ``is_*`` flags listed in ``FLAG_NAMES``.
"""

from __future__ import annotations

import hashlib
import io
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable

import numpy as np

log = logging.getLogger(__name__)


class Scenario(str, Enum):
    HOMEFEED = "homefeed"
    ADS = "advertisements"
    SEARCH = "search"

    @property
    def priority(self) -> int:
        return _PRIORITY[self]


SCENARIOS = (Scenario.HOMEFEED, Scenario.ADS, Scenario.SEARCH)
_PRIORITY = {s: i for i, s in enumerate(SCENARIOS)}
RECORD_KEYS = {
    Scenario.HOMEFEED: "homefeed_item_lastn",
    Scenario.ADS: "ads_item_lastn",
    Scenario.SEARCH: "search_item_lastn",
}

FLAG_NAMES = (
    "is_click", "is_click_profile", "is_collect", "is_comment", "is_follow", "is_hide",
    "is_like", "is_message", "is_pagetime", "is_read_comment", "is_share", "is_videoend",
)
FLAG_BIT = {name: i for i, name in enumerate(FLAG_NAMES)}


def parse_scenario(value) -> Scenario:
    if isinstance(value, Scenario):
        return value
    aliases = {"ads": Scenario.ADS, "advertisement": Scenario.ADS}
    v = str(value).lower()
    return aliases.get(v) or Scenario(v)


@dataclass(frozen=True, slots=True)
class InteractionEvent:
    item_id: str
    scenario: Scenario
    timestamp: int
    duration: int = 0
    flags: int = 0
    item_type: str = "note"
    page_key: int = 0

    def __post_init__(self):
        if self.timestamp <= 0:
            raise ValueError(f"timestamp must be positive, got {self.timestamp}")
        if self.duration < 0:
            raise ValueError(f"duration must be non-negative, got {self.duration}")
        if not 0 <= self.flags < (1 << len(FLAG_NAMES)):
            raise ValueError(f"flags out of range: {self.flags}")

    def flag(self, name: str) -> int:
        return (self.flags >> FLAG_BIT[name]) & 1

    def flag_vector(self) -> tuple:
        return tuple((self.flags >> i) & 1 for i in range(len(FLAG_NAMES)))

    @property
    def is_click(self) -> bool:
        return bool(self.flags & 1)


def pack_flags(**flags) -> int:
    bits = 0
    for name, value in flags.items():
        if value:
            bits |= 1 << FLAG_BIT[name]
    return bits


def _merge_key(indexed):
    i, ev = indexed
    return (ev.timestamp, ev.scenario.priority, i)


def merge_timeline(events: Iterable[InteractionEvent]) -> list:
    """Chronological order; ties by scenario priority then input order."""
    return [ev for _, ev in sorted(enumerate(events), key=_merge_key)]


@dataclass(frozen=True)
class UserHistory:
    user_id: str
    events_by_scenario: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {s: tuple(self.events_by_scenario.get(s, ())) for s in SCENARIOS}
        for s, evs in full.items():
            for ev in evs:
                if ev.scenario is not s:
                    raise ValueError(f"event tagged {ev.scenario.value} stored under {s.value}")
            if any(a.timestamp > b.timestamp for a, b in zip(evs, evs[1:])):
                raise ValueError(f"{s.value} events are not chronological")
        object.__setattr__(self, "events_by_scenario", full)

    @classmethod
    def from_events(cls, user_id: str, events: Iterable[InteractionEvent]) -> "UserHistory":
        buckets = {s: [] for s in SCENARIOS}
        for ev in events:
            buckets[ev.scenario].append(ev)
        return cls(user_id, {s: sorted(v, key=lambda e: e.timestamp) for s, v in buckets.items()})

    def __getitem__(self, scenario) -> tuple:
        return self.events_by_scenario[parse_scenario(scenario)]

    def timeline(self) -> list:
        return merge_timeline(ev for s in SCENARIOS for ev in self.events_by_scenario[s])

    def __len__(self) -> int:
        return sum(len(v) for v in self.events_by_scenario.values())

    def restrict(self, scenarios) -> "UserHistory":
        keep = {parse_scenario(s) for s in scenarios}
        return UserHistory(self.user_id, {s: (v if s in keep else ())
                                          for s, v in self.events_by_scenario.items()})


# ---------------------------------------------------------------------------
# parsing / serialization


@dataclass
class ParsedLog:
    users: list
    errors: list  # (line number, message)
    dropped_events: int = 0


def _event_from_json(obj: dict, scenario: Scenario) -> InteractionEvent | None:
    if not isinstance(obj, dict) or "item_id" not in obj or "timestamp" not in obj:
        return None
    flags = 0
    for name, bit in FLAG_BIT.items():
        v = obj.get(name, 0)
        if v not in (0, 1):
            return None
        if v:
            flags |= 1 << bit
    try:
        return InteractionEvent(
            item_id=str(obj["item_id"]),
            scenario=scenario,
            timestamp=int(obj["timestamp"]),
            duration=int(obj.get("duration", 0)),
            flags=flags,
            item_type=str(obj.get("type", "note")),
            page_key=int(obj.get("page_key", 0)),
        )
    except (TypeError, ValueError):
        return None


def _lines(stream):
    if isinstance(stream, (bytes, str)):
        stream = io.BytesIO(stream if isinstance(stream, bytes) else stream.encode())
    for line in stream:
        yield line.decode() if isinstance(line, bytes) else line


def parse_log(stream) -> ParsedLog:
    """Parse newline-delimited user records.

    Malformed lines are reported with their 1-based line number and skipped.
    Events missing ``item_id``/``timestamp`` or carrying out-of-range values
    are dropped and counted.  Per-scenario lists are stably sorted by
    timestamp.
    """
    users, errors, dropped = [], [], 0
    for lineno, line in enumerate(_lines(stream), start=1):
        if not line.strip():
            continue
        try:
            rec = json.loads(line)
            user_id = rec["user_id"]
            data = rec.get("data") or {}
            if not isinstance(data, dict):
                raise TypeError("data is not an object")
        except (ValueError, KeyError, TypeError, AttributeError) as exc:
            errors.append((lineno, f"{type(exc).__name__}: {exc}"))
            continue
        by_scenario = {}
        for scenario, key in RECORD_KEYS.items():
            evs = []
            for obj in data.get(key) or []:
                ev = _event_from_json(obj, scenario)
                if ev is None:
                    dropped += 1
                else:
                    evs.append(ev)
            by_scenario[scenario] = sorted(evs, key=lambda e: e.timestamp)
        users.append(UserHistory(str(user_id), by_scenario))
    if errors or dropped:
        log.info("parse_log: %d malformed records, %d dropped events", len(errors), dropped)
    return ParsedLog(users, errors, dropped)


def event_to_json(ev: InteractionEvent) -> dict:
    obj = {"duration": ev.duration}
    for name, bit in FLAG_BIT.items():
        obj[name] = (ev.flags >> bit) & 1
    obj.update(item_id=ev.item_id, page_key=ev.page_key, timestamp=ev.timestamp, type=ev.item_type)
    return obj


def user_to_json(h: UserHistory) -> dict:
    return {"user_id": h.user_id,
            "data": {key: [event_to_json(ev) for ev in h[s]] for s, key in RECORD_KEYS.items()}}


def serialize_log(histories: Iterable[UserHistory], stream) -> None:
    for h in histories:
        stream.write(json.dumps(user_to_json(h), separators=(",", ":")) + "\n")


def dumps_log(histories: Iterable[UserHistory]) -> bytes:
    buf = io.StringIO()
    serialize_log(histories, buf)
    return buf.getvalue().encode()


# ---------------------------------------------------------------------------
# validity filter


@dataclass(frozen=True)
class ValidityPolicy:
    min_homefeed_clicks: int = 30
    min_ads_clicks: int = 5
    min_click_duration_s: int = 5

    def __post_init__(self):
        if min(self.min_homefeed_clicks, self.min_ads_clicks, self.min_click_duration_s) < 0:
            raise ValueError("validity thresholds must be non-negative")


def count_valid_clicks(events, min_duration: int) -> int:
    # a click counts only when viewing time strictly exceeds the threshold
    return sum(1 for ev in events if ev.is_click and ev.duration > min_duration)


def validate_user(h: UserHistory, policy: ValidityPolicy = ValidityPolicy()) -> tuple:
    """Return ``(accepted, reason)``; ``reason`` is empty when accepted."""
    hf = count_valid_clicks(h[Scenario.HOMEFEED], policy.min_click_duration_s)
    if hf < policy.min_homefeed_clicks:
        return False, f"homefeed valid clicks {hf} < {policy.min_homefeed_clicks}"
    ads = count_valid_clicks(h[Scenario.ADS], policy.min_click_duration_s)
    if ads < policy.min_ads_clicks:
        return False, f"ads valid clicks {ads} < {policy.min_ads_clicks}"
    return True, ""


# ---------------------------------------------------------------------------
# item catalog


@dataclass(frozen=True)
class Item:
    item_id: str
    tokens: tuple
    visual: tuple | None = None
    topic: int = -1


class Catalog:
    """Ordered item collection with an id -> row lookup."""

    def __init__(self, items, vocab_size: int, visual_dim: int | None = None):
        self.items = list(items)
        self.vocab_size = vocab_size
        self.visual_dim = visual_dim
        self.index = {}
        dups = []
        for i, it in enumerate(self.items):
            if it.item_id in self.index:
                dups.append(it.item_id)
            self.index[it.item_id] = i
        if dups:
            raise ValueError(f"duplicate item ids: {sorted(set(dups))[:10]}")
        self.ids = np.array([it.item_id for it in self.items])

    def __len__(self):
        return len(self.items)

    def __getitem__(self, item_id: str) -> Item:
        return self.items[self.index[item_id]]

    def topics(self) -> np.ndarray:
        return np.array([it.topic for it in self.items])

    def dump(self, stream) -> None:
        stream.write(json.dumps({"vocab_size": self.vocab_size, "visual_dim": self.visual_dim}) + "\n")
        for it in self.items:
            obj = {"item_id": it.item_id, "tokens": list(it.tokens), "topic": it.topic}
            if it.visual is not None:
                obj["visual"] = list(it.visual)
            stream.write(json.dumps(obj, separators=(",", ":")) + "\n")

    @classmethod
    def load(cls, stream) -> "Catalog":
        lines = _lines(stream)
        header = json.loads(next(lines))
        items = []
        for line in lines:
            if not line.strip():
                continue
            o = json.loads(line)
            vis = tuple(o["visual"]) if o.get("visual") is not None else None
            items.append(Item(o["item_id"], tuple(o["tokens"]), vis, o.get("topic", -1)))
        return cls(items, header["vocab_size"], header.get("visual_dim"))


# ---------------------------------------------------------------------------
# synthetic generator


@dataclass(frozen=True)
class GeneratorConfig:
    n_users: int = 5000
    n_items: int = 20000
    n_topics: int = 50
    vocab_size: int = 50000
    visual_dim: int = 64
    words_per_topic: int = 40
    tokens_per_item: tuple = (4, 8)
    general_token_frac: float = 0.25
    visual_noise: float = 0.6
    events_per_user: tuple = (320, 640)
    # homefeed, advertisements, search
    scenario_rates: tuple = (0.82, 0.05, 0.13)
    noise: tuple = (0.55, 0.25, 0.05)
    rho: float = 0.8        # homefeed/search topic sharing
    rho_ads: float = 0.3    # advertisements share topics less often
    topics_per_user: tuple = (1, 3)
    stickiness: float = 0.97
    # a search explores a fresh topic with probability search_explore; a
    # homefeed event follows the latest search's topic with probability
    # search_lead * rho, so rho = 0 leaves the scenarios independent
    search_explore: float = 0.3
    search_lead: float = 0.6
    mean_gap_s: float = 1800.0
    start_ts: int = 1_746_000_000

    def validate(self):
        if self.n_users <= 0 or self.n_items <= 0 or self.n_topics <= 0:
            raise ValueError("n_users, n_items and n_topics must all be positive")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError("rho must lie in [0, 1]")
        for name in ("rho_ads", "stickiness", "search_explore", "search_lead"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.n_items < self.n_topics:
            raise ValueError("need at least one item per topic")
        if self.topics_per_user[1] > self.n_topics or self.topics_per_user[0] < 1:
            raise ValueError("topics_per_user out of range")


def _stable_token(key: str, vocab: int) -> int:
    return int.from_bytes(hashlib.blake2b(key.encode(), digest_size=8).digest(), "little") % vocab


def _item_id(seed: int, i: int) -> str:
    return hashlib.blake2b(f"item:{seed}:{i}".encode(), digest_size=12).hexdigest()


_ON_TOPIC_P = {"is_like": 0.25, "is_collect": 0.10, "is_share": 0.05, "is_message": 0.02,
               "is_hide": 0.01}
_OFF_TOPIC_P = {"is_like": 0.03, "is_collect": 0.01, "is_share": 0.005, "is_message": 0.002,
                "is_hide": 0.10}
_COMMON_P = {"is_click_profile": 0.05, "is_comment": 0.03, "is_follow": 0.01,
             "is_pagetime": 0.7, "is_read_comment": 0.2, "is_videoend": 0.1}
_CLICK_P = (0.9, 0.9, 0.95)


def _make_catalog(cfg: GeneratorConfig, rng, seed: int) -> Catalog:
    T = cfg.n_topics
    pools = np.array([[_stable_token(f"topic{t}:w{k}", cfg.vocab_size)
                       for k in range(cfg.words_per_topic)] for t in range(T)])
    general = np.array([_stable_token(f"general:w{k}", cfg.vocab_size) for k in range(500)])
    centroids = rng.standard_normal((T, cfg.visual_dim))
    centroids /= np.linalg.norm(centroids, axis=1, keepdims=True)
    # contiguous topic blocks so items of topic t are rows [start_t, start_t+size_t)
    topic_of = np.sort(np.concatenate([np.arange(T), rng.integers(0, T, cfg.n_items - T)]))
    items = []
    lo, hi = cfg.tokens_per_item
    for i in range(cfg.n_items):
        t = int(topic_of[i])
        n = int(rng.integers(lo, hi + 1))
        gen = rng.random(n) < cfg.general_token_frac
        toks = np.where(gen, general[rng.integers(0, len(general), n)],
                        pools[t, rng.integers(0, cfg.words_per_topic, n)])
        vis = centroids[t] + cfg.visual_noise * rng.standard_normal(cfg.visual_dim) / np.sqrt(cfg.visual_dim)
        items.append(Item(_item_id(seed, i), tuple(int(x) for x in toks),
                          tuple(float(x) for x in vis), t))
    return Catalog(items, cfg.vocab_size, cfg.visual_dim)


def generate_synthetic(cfg: GeneratorConfig = GeneratorConfig(), seed: int = 0):
    """Build a catalog and user histories with known latent topic structure.

    Each user holds 1-3 topic slots.  Every scenario maps the slots to the
    user's shared topics with probability ``rho`` (``rho_ads`` for
    advertisements) and to an independent draw otherwise.  A sticky Markov chain picks the active slot per event, so all
    scenarios that share topics also share the user's current focus.  Searches
    sometimes explore a new topic, and homefeed events may follow the latest
    search's topic, so search carries intent the feed only shows later.  Off-topic
    events (probability ``noise`` per scenario) pick a uniform catalog item.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    catalog = _make_catalog(cfg, rng, seed)
    topic_of = catalog.topics()
    starts = np.searchsorted(topic_of, np.arange(cfg.n_topics))
    sizes = np.bincount(topic_of, minlength=cfg.n_topics)
    ids = catalog.ids.tolist()
    rates = np.asarray(cfg.scenario_rates, dtype=float)
    rates = rates / rates.sum()
    noise = np.asarray(cfg.noise, dtype=float)

    users = []
    for u in range(cfg.n_users):
        k = int(rng.integers(cfg.topics_per_user[0], cfg.topics_per_user[1] + 1))
        shared = rng.choice(cfg.n_topics, k, replace=False)
        per_scen = np.stack([shared if rng.random() < r
                             else rng.choice(cfg.n_topics, k, replace=False)
                             for r in (cfg.rho, cfg.rho_ads, cfg.rho)])
        n = int(rng.integers(cfg.events_per_user[0], cfg.events_per_user[1] + 1))
        scen = rng.choice(3, n, p=rates)
        switch = rng.random(n) > cfg.stickiness
        switch[0] = True
        fresh = rng.integers(0, k, n)
        last_switch = np.maximum.accumulate(np.where(switch, np.arange(n), 0))
        slot = fresh[last_switch]
        topic = per_scen[scen, slot]
        is_search = scen == 2
        explore = is_search & (rng.random(n) < cfg.search_explore)
        topic = np.where(explore, rng.integers(0, cfg.n_topics, n), topic)
        idx = np.where(is_search, np.arange(n), -1)
        prev_search = np.concatenate([[-1], np.maximum.accumulate(idx)[:-1]])
        follow = (scen == 0) & (prev_search >= 0) & (rng.random(n) < cfg.search_lead * cfg.rho)
        topic = np.where(follow, topic[np.maximum(prev_search, 0)], topic)
        off = rng.random(n) < noise[scen]
        on_item = starts[topic] + (rng.random(n) * sizes[topic]).astype(np.int64)
        rand_item = rng.integers(0, cfg.n_items, n)
        item = np.where(off, rand_item, on_item)
        gaps = 1 + np.floor(rng.exponential(cfg.mean_gap_s, n)).astype(np.int64)
        ts = cfg.start_ts + int(rng.integers(0, 30 * 86400)) + np.cumsum(gaps)
        dur = np.floor(rng.lognormal(2.7, 0.8, n)).astype(np.int64)
        bits = np.zeros(n, dtype=np.int64)
        click = rng.random(n) < np.take(_CLICK_P, scen)
        bits |= click.astype(np.int64) << FLAG_BIT["is_click"]
        for name, p in _COMMON_P.items():
            bits |= (rng.random(n) < p).astype(np.int64) << FLAG_BIT[name]
        for name in _ON_TOPIC_P:
            p = np.where(off, _OFF_TOPIC_P[name], _ON_TOPIC_P[name])
            bits |= (rng.random(n) < p).astype(np.int64) << FLAG_BIT[name]
        buckets = {s: [] for s in SCENARIOS}
        for j in range(n):
            s = SCENARIOS[scen[j]]
            buckets[s].append(InteractionEvent(ids[item[j]], s, int(ts[j]), int(dur[j]), int(bits[j])))
        uid = hashlib.blake2b(f"user:{seed}:{u}".encode(), digest_size=8).hexdigest()
        users.append(UserHistory(uid, buckets))
    return catalog, users


def topic_overlap(h: UserHistory, catalog: Catalog, a=Scenario.HOMEFEED, b=Scenario.SEARCH) -> float | None:
    """Probability that a random ``a`` event and a random ``b`` event share a topic."""
    ta = np.array([catalog[e.item_id].topic for e in h[a]])
    tb = np.array([catalog[e.item_id].topic for e in h[b]])
    if len(ta) == 0 or len(tb) == 0:
        return None
    ca = np.bincount(ta, minlength=max(ta.max(), tb.max()) + 1)
    cb = np.bincount(tb, minlength=len(ca))
    return float(ca @ cb[:len(ca)]) / (len(ta) * len(tb))


# ---------------------------------------------------------------------------
# evaluation split


class SplitUnavailable(Exception):
    """The history has no admissible cutoff."""


@dataclass(frozen=True)
class EvalSplit:
    user_id: str
    input_events: tuple
    targets: tuple
    target_scenarios: tuple
    t_cut: int
    cut_index: int
    candidate_pool: np.ndarray   # catalog rows, targets last

    def pool_ids(self, ids) -> list:
        return [ids[i] for i in self.candidate_pool]

    def input_history(self) -> UserHistory:
        return UserHistory.from_events(self.user_id, self.input_events)


def admissible_cutoffs(timeline, min_prefix: int, n_targets: int = 3) -> list:
    n = len(timeline)
    return [c for c in range(max(min_prefix, 1), n - n_targets + 1)
            if timeline[c - 1].timestamp < timeline[c].timestamp]


def temporal_split(h: UserHistory, rng, pool_source, pool_size: int,
                   min_prefix: int = 32, n_targets: int = 3) -> EvalSplit:
    """Cut the merged timeline at a uniformly drawn admissible position.

    The targets are the ``n_targets`` events at and after the cutoff; the
    input is everything strictly earlier.  ``pool_source`` is a ``Catalog`` or
    a sequence of item ids; the pool holds exactly ``pool_size`` distinct
    rows of it covering every target.
    """
    timeline = h.timeline()
    cuts = admissible_cutoffs(timeline, min_prefix, n_targets)
    if not cuts:
        raise SplitUnavailable(f"user {h.user_id}: {len(timeline)} events, no admissible cutoff")
    c = cuts[int(rng.integers(0, len(cuts)))]
    tgt = timeline[c:c + n_targets]
    target_ids = tuple(e.item_id for e in tgt)
    pool = sample_pool(pool_source, pool_size, target_ids, rng)
    return EvalSplit(h.user_id, tuple(timeline[:c]), target_ids,
                     tuple(e.scenario for e in tgt), tgt[0].timestamp, c, pool)


def sample_pool(pool_source, pool_size: int, targets, rng) -> np.ndarray:
    """Rows into ``pool_source`` ids: ``pool_size - |unique targets|`` uniform
    non-target draws followed by the unique targets."""
    ids = pool_source.ids if isinstance(pool_source, Catalog) else np.asarray(pool_source)
    index = pool_source.index if isinstance(pool_source, Catalog) else {x: i for i, x in enumerate(ids)}
    uniq = np.array([index[t] for t in dict.fromkeys(targets)], dtype=np.int64)
    if pool_size < len(uniq) or pool_size > len(ids):
        raise ValueError(f"pool_size {pool_size} incompatible with {len(ids)} items / {len(uniq)} targets")
    need = pool_size - len(uniq)
    # need + |targets| draws always leave at least `need` non-targets
    draw = rng.choice(len(ids), need + len(uniq), replace=False)
    picked = draw[~np.isin(draw, uniq)][:need]
    return np.concatenate([picked, uniq]).astype(np.int32)
