"""Item and user towers.

The item tower prepends a special token to an item's token list, runs a small
pre-LN transformer, keeps the special token's output state, adds a linear
projection of the optional visual vector and L2-normalises.

The user tower appends K learnable interest queries to the fused sequence
rows, runs a bidirectional transformer over rows and queries together and
returns the normalised query output states.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics as nx
from .events import SCENARIOS, Catalog
from .mixer import DEFAULT_CHANNELS, GAP_BUCKETS, MixerTables, MixStrategy
from .numerics import checkpoint


@dataclass(frozen=True)
class ItemEncoderConfig:
    vocab_size: int = 50000
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    max_tokens: int = 32
    visual_dim: int | None = 64

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")


@dataclass(frozen=True)
class UserEncoderConfig:
    d: int = 64
    layers: int = 2
    heads: int = 4
    ffn_mult: int = 4
    last_n: int = 128
    window: int = 10
    queries_per_scenario: int = 3
    frozen_item_tower: bool = False
    action_channels: tuple = DEFAULT_CHANNELS
    gap_buckets: int = GAP_BUCKETS

    def __post_init__(self):
        if self.d % self.heads:
            raise ValueError("d must be divisible by heads")
        if not 0 <= self.window < self.last_n:
            raise ValueError("window must satisfy 0 <= W < last_n")
        object.__setattr__(self, "action_channels", tuple(self.action_channels))

    @property
    def K(self) -> int:
        return self.queries_per_scenario * len(SCENARIOS)


class Block:
    """Pre-LN transformer block: x + MHA(LN(x)), then x + FFN(LN(x))."""

    def __init__(self, name: str, d: int, heads: int, ffn_mult: int, rng):
        self.d, self.heads = d, heads
        f = d * ffn_mult
        P = lambda suffix, arr: nx.Parameter(arr, f"{name}.{suffix}")  # noqa: E731
        self.ln1_g, self.ln1_b = P("ln1.g", np.ones(d)), P("ln1.b", np.zeros(d))
        self.wq = P("wq", nx.uniform_init(rng, (d, d), d))
        self.wk = P("wk", nx.uniform_init(rng, (d, d), d))
        self.wv = P("wv", nx.uniform_init(rng, (d, d), d))
        self.wo = P("wo", nx.uniform_init(rng, (d, d), d))
        self.bo = P("bo", np.zeros(d))
        self.ln2_g, self.ln2_b = P("ln2.g", np.ones(d)), P("ln2.b", np.zeros(d))
        self.w1, self.b1 = P("w1", nx.uniform_init(rng, (d, f), d)), P("b1", np.zeros(f))
        self.w2, self.b2 = P("w2", nx.uniform_init(rng, (f, d), f)), P("b2", np.zeros(d))

    def parameters(self):
        return [self.ln1_g, self.ln1_b, self.wq, self.wk, self.wv, self.wo, self.bo,
                self.ln2_g, self.ln2_b, self.w1, self.b1, self.w2, self.b2]

    def _heads(self, x, B, L):
        dh = self.d // self.heads
        return nx.transpose(nx.reshape(x, (B, L, self.heads, dh)), (0, 2, 1, 3))

    def __call__(self, x: nx.Tensor, mask) -> nx.Tensor:
        B, L, d = x.shape
        h = nx.layer_norm(x, self.ln1_g, self.ln1_b)
        q = self._heads(h @ self.wq, B, L)
        k = self._heads(h @ self.wk, B, L)
        v = self._heads(h @ self.wv, B, L)
        a = nx.scaled_dot_attention(q, k, v, mask)
        a = nx.reshape(nx.transpose(a, (0, 2, 1, 3)), (B, L, d))
        x = x + (a @ self.wo + self.bo)
        h = nx.layer_norm(x, self.ln2_g, self.ln2_b)
        h = nx.relu(h @ self.w1 + self.b1)
        return x + (h @ self.w2 + self.b2)


def key_mask(valid: np.ndarray) -> np.ndarray:
    """(B, L) validity -> additive (B, 1, 1, L) attention mask."""
    return np.where(valid, 0.0, nx.MASK_VALUE)[:, None, None, :]


# ---------------------------------------------------------------------------
# item tower


@dataclass
class ItemFeatures:
    """Catalog content packed as arrays: special token first, then item tokens."""

    ids: np.ndarray
    tokens: np.ndarray          # (M, 1 + max_tokens), 0-padded after the length
    lengths: np.ndarray         # (M,) including the special token
    visual: np.ndarray | None   # (M, d_v), zero rows where absent
    index: dict = field(default_factory=dict)

    @classmethod
    def from_catalog(cls, catalog: Catalog, cfg: ItemEncoderConfig) -> "ItemFeatures":
        M = len(catalog)
        width = 1 + min(cfg.max_tokens, max((len(it.tokens) for it in catalog.items), default=0))
        toks = np.zeros((M, width), np.int64)
        toks[:, 0] = cfg.vocab_size  # special token
        lengths = np.ones(M, np.int64)
        vis = np.zeros((M, cfg.visual_dim)) if cfg.visual_dim else None
        for i, it in enumerate(catalog.items):
            t = it.tokens[:cfg.max_tokens]
            if t and (min(t) < 0 or max(t) >= cfg.vocab_size):
                raise ValueError(f"item {it.item_id}: token id out of range [0, {cfg.vocab_size})")
            toks[i, 1:1 + len(t)] = t
            lengths[i] = 1 + len(t)
            if vis is not None and it.visual is not None:
                if len(it.visual) != cfg.visual_dim:
                    raise ValueError(f"item {it.item_id}: visual length {len(it.visual)} != {cfg.visual_dim}")
                vis[i] = it.visual
        return cls(catalog.ids, toks, lengths, vis, dict(catalog.index))

    def rows(self, item_ids) -> np.ndarray:
        return np.array([self.index[i] for i in item_ids], dtype=np.int64)


class ItemEncoder:
    def __init__(self, cfg: ItemEncoderConfig, rng):
        self.cfg = cfg
        d = cfg.d
        # unit-variance token rows; the special token starts at zero so its
        # output state is driven by the item's own tokens
        tok = nx.uniform_init(rng, (cfg.vocab_size + 1, d), 1, gain=3 ** 0.5)
        tok[cfg.vocab_size] = 0.0
        self.tok = nx.Parameter(tok, "item.tok")
        self.pos = nx.Parameter(nx.uniform_init(rng, (cfg.max_tokens + 1, d), d), "item.pos")
        self.blocks = [Block(f"item.block{i}", d, cfg.heads, cfg.ffn_mult, rng) for i in range(cfg.layers)]
        self.ln_g, self.ln_b = nx.Parameter(np.ones(d), "item.ln.g"), nx.Parameter(np.zeros(d), "item.ln.b")
        self.vis = (nx.Parameter(nx.uniform_init(rng, (cfg.visual_dim, d), 1, gain=3 ** 0.5), "item.vis")
                    if cfg.visual_dim else None)

    def parameters(self):
        ps = [self.tok, self.pos]
        for b in self.blocks:
            ps += b.parameters()
        ps += [self.ln_g, self.ln_b]
        if self.vis is not None:
            ps.append(self.vis)
        return ps

    def forward(self, tokens: np.ndarray, lengths: np.ndarray, visual: np.ndarray | None) -> nx.Tensor:
        """Encode a batch of packed items -> (N, d) unit rows."""
        N = tokens.shape[0]
        width = int(lengths.max()) if N else 1
        tokens = tokens[:, :width]
        if tokens.size and tokens.max() > self.cfg.vocab_size:
            raise ValueError("token id out of range")
        valid = np.arange(width)[None, :] < lengths[:, None]
        x = nx.embedding_lookup(self.tok, tokens) + nx.embedding_lookup(self.pos, np.arange(width))
        mask = key_mask(valid)
        for blk in self.blocks:
            x = blk(x, mask)
        h = nx.layer_norm(x[:, 0, :], self.ln_g, self.ln_b)
        if self.vis is not None and visual is not None:
            h = h + nx.matmul(nx.Tensor(visual), self.vis)
        return nx.l2_normalize(h)

    def encode_rows(self, feats: ItemFeatures, rows) -> nx.Tensor:
        rows = np.asarray(rows, dtype=np.int64)
        vis = feats.visual[rows] if feats.visual is not None else None
        return self.forward(feats.tokens[rows], feats.lengths[rows], vis)

    def encode_all(self, feats: ItemFeatures, batch: int = 2048) -> np.ndarray:
        out = np.empty((len(feats.ids), self.cfg.d))
        for lo in range(0, len(feats.ids), batch):
            rows = np.arange(lo, min(lo + batch, len(feats.ids)))
            out[rows] = self.encode_rows(feats, rows).data
        return out


# ---------------------------------------------------------------------------
# user tower


class UserEncoder:
    def __init__(self, cfg: UserEncoderConfig, rng):
        self.cfg = cfg
        d = cfg.d
        self.tables = MixerTables(d, cfg.last_n, rng, cfg.action_channels, cfg.gap_buckets, prefix="user.mixer")
        self.queries = nx.Parameter(nx.uniform_init(rng, (cfg.K, d), d), "user.queries")
        self.blocks = [Block(f"user.block{i}", d, cfg.heads, cfg.ffn_mult, rng) for i in range(cfg.layers)]
        self.ln_g, self.ln_b = nx.Parameter(np.ones(d), "user.ln.g"), nx.Parameter(np.zeros(d), "user.ln.b")

    def parameters(self):
        ps = self.tables.parameters() + [self.queries]
        for b in self.blocks:
            ps += b.parameters()
        return ps + [self.ln_g, self.ln_b]

    def forward(self, fused: nx.Tensor, valid: np.ndarray, hold_out: int = 0) -> nx.Tensor:
        """Interest vectors (B, K, d) from fused rows (B, L, d).

        ``hold_out`` hides the last that-many valid rows of each sequence from
        the encoder, which is how the training window is withheld.  A sequence
        with no visible row still yields interests: the queries attend to
        each other only.
        """
        B, L, d = fused.shape
        valid = valid.copy()
        if hold_out:
            lengths = valid.sum(axis=1)
            if (lengths - hold_out < 1).any():
                raise ValueError(f"sequence too short to hold out W={hold_out} rows")
            for b in range(B):
                valid[b, lengths[b] - hold_out:lengths[b]] = False
        K = self.cfg.K
        q = nx.add(nx.Tensor(np.zeros((B, K, d))), self.queries)
        x = nx.concat_rows([fused, q], axis=1)
        mask = key_mask(np.concatenate([valid, np.ones((B, K), bool)], axis=1))
        for blk in self.blocks:
            x = blk(x, mask)
        out = nx.layer_norm(x[:, L:, :], self.ln_g, self.ln_b)
        return nx.l2_normalize(out)


def score_user_item(interests: np.ndarray, item: np.ndarray) -> float:
    """Max cosine between an item and any interest vector."""
    interests = np.atleast_2d(interests)
    ni = np.linalg.norm(interests, axis=1)
    return float(np.max(interests @ item / (ni * np.linalg.norm(item))))


def score_matrix(interests: np.ndarray, items: np.ndarray) -> np.ndarray:
    """Max-over-interests scores of unit-norm ``items`` (M, d) for (K, d) interests."""
    return (items @ np.atleast_2d(interests).T).max(axis=1)


def pooled_user_vector(interests: np.ndarray) -> np.ndarray:
    """Normalised mean of the interest vectors (single-vector diagnostic)."""
    m = np.atleast_2d(interests).mean(axis=0)
    return m / max(np.linalg.norm(m), 1e-30)


# ---------------------------------------------------------------------------
# full model


class TwoTowerModel:
    """Both towers plus the learnable contrastive temperature."""

    def __init__(self, item_cfg: ItemEncoderConfig, user_cfg: UserEncoderConfig,
                 seed: int = 0, tau_init: float = 20.0, strategy: MixStrategy = MixStrategy.TWO_D):
        if item_cfg.d != user_cfg.d:
            raise ValueError("item and user towers must share d")
        self.item_cfg, self.user_cfg = item_cfg, user_cfg
        self.strategy = MixStrategy(strategy)
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.item = ItemEncoder(item_cfg, rng)
        self.user = UserEncoder(user_cfg, rng)
        self.tau = nx.Parameter(np.array(float(tau_init)), "tau")

    def parameters(self):
        return self.item.parameters() + self.user.parameters() + [self.tau]

    def trainable(self):
        ps = self.user.parameters() + [self.tau]
        if not self.user_cfg.frozen_item_tower:
            ps = self.item.parameters() + ps
        return ps

    def state_dict(self) -> dict:
        return {p.name: p.data for p in self.parameters()}

    def config_dict(self) -> dict:
        return {"item": asdict(self.item_cfg), "user": asdict(self.user_cfg),
                "strategy": self.strategy.value, "seed": self.seed}

    def checksum(self, which: str = "all") -> str:
        params = {"all": self.parameters, "item": self.item.parameters,
                  "user": self.user.parameters}[which]()
        return checkpoint.checksum({p.name: p.data for p in params})

    def save(self, path, extra_meta: dict | None = None) -> None:
        meta = {"config": self.config_dict(), **(extra_meta or {})}
        checkpoint.save(path, self.state_dict(), meta)

    def to_bytes(self) -> bytes:
        return checkpoint.dumps(self.state_dict(), {"config": self.config_dict()})

    @classmethod
    def from_state(cls, tensors: dict, meta: dict) -> "TwoTowerModel":
        cfg = meta["config"]
        item_cfg = ItemEncoderConfig(**cfg["item"])
        ucfg = dict(cfg["user"])
        ucfg["action_channels"] = tuple(ucfg["action_channels"])
        model = cls(item_cfg, UserEncoderConfig(**ucfg), seed=cfg.get("seed", 0),
                    strategy=cfg.get("strategy", "2d"))
        model.load_state_dict(tensors)
        return model

    @classmethod
    def load(cls, path) -> "TwoTowerModel":
        tensors, meta = checkpoint.load(path)
        return cls.from_state(tensors, meta)

    def load_state_dict(self, tensors: dict) -> None:
        for p in self.parameters():
            if p.name not in tensors:
                raise checkpoint.CheckpointError(f"missing tensor {p.name}")
            arr = tensors[p.name]
            if arr.shape != p.data.shape:
                raise checkpoint.CheckpointError(
                    f"{p.name}: checkpoint shape {arr.shape} != model shape {p.data.shape}")
            p.data = np.array(arr, dtype=np.float64)

    def model_hash(self) -> bytes:
        h = hashlib.sha256(json.dumps(self.config_dict(), sort_keys=True).encode())
        h.update(bytes.fromhex(self.checksum("item")))
        return h.digest()
