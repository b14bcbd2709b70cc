"""Dataset preparation, model construction and the ablation runner.

A :class:`Dataset` holds one temporal split per validated user.  Training
sees each user's events strictly before their cutoff (the whole history for
users without an admissible cutoff), so every split user is also an
evaluation user without leakage.
"""

from __future__ import annotations

import hashlib
import json
import statistics
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .encoders import ItemEncoderConfig, ItemFeatures, TwoTowerModel, UserEncoderConfig
from .evaluation import KS, EmbeddingCache, MetricsReport, ScenarioConfig, evaluate, format_table
from .events import (SCENARIOS, Catalog, GeneratorConfig, Scenario, SplitUnavailable, ValidityPolicy,
                     generate_synthetic, parse_log, temporal_split, validate_user)
from .mixer import MixQuota, MixStrategy
from .training import TrainConfig, TrainResult, train


@dataclass(frozen=True)
class EvalConfig:
    pool_size: int = 10000
    min_prefix: int = 32
    n_targets: int = 3


def _desk_item() -> ItemEncoderConfig:
    return ItemEncoderConfig(d=32, layers=1, heads=2, ffn_mult=2, max_tokens=8)


def _desk_user() -> UserEncoderConfig:
    return UserEncoderConfig(d=32, layers=1, heads=2, ffn_mult=2)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything a run needs; round-trips through a JSON file.

    The defaults are sized for a single CPU core: 32-wide towers with one
    block each.  The full-width encoder defaults live on the encoder configs.
    """

    generator: GeneratorConfig = field(default_factory=GeneratorConfig)
    item: ItemEncoderConfig = field(default_factory=_desk_item)
    user: UserEncoderConfig = field(default_factory=_desk_user)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(epochs=2, lr=3e-3))
    eval: EvalConfig = field(default_factory=EvalConfig)
    policy: ValidityPolicy = field(default_factory=ValidityPolicy)
    strategy: MixStrategy = MixStrategy.TWO_D

    def to_dict(self) -> dict:
        d = {k: asdict(getattr(self, k)) for k in ("generator", "item", "user", "train", "eval", "policy")}
        d["strategy"] = MixStrategy(self.strategy).value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        base = cls()

        def sub(key, typ):
            cur = asdict(getattr(base, key))
            extra = set(d.get(key, {})) - set(cur)
            if extra:
                raise ValueError(f"unknown {key} config keys: {sorted(extra)}")
            cur.update(d.get(key, {}))
            for k, v in cur.items():
                if isinstance(v, list):
                    cur[k] = tuple(v)
            return typ(**cur)

        unknown = set(d) - {"generator", "item", "user", "train", "eval", "policy", "strategy"}
        if unknown:
            raise ValueError(f"unknown config sections: {sorted(unknown)}")
        return cls(sub("generator", GeneratorConfig), sub("item", ItemEncoderConfig),
                   sub("user", UserEncoderConfig), sub("train", TrainConfig), sub("eval", EvalConfig),
                   sub("policy", ValidityPolicy), MixStrategy(d.get("strategy", base.strategy)))

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def with_seed(self, seed: int) -> "ExperimentConfig":
        return replace(self, train=replace(self.train, seed=seed))


@dataclass
class Dataset:
    catalog: Catalog
    splits: list
    train_histories: list
    n_invalid: int = 0
    invalid_reasons: dict = field(default_factory=dict)

    @property
    def data_hash(self) -> str:
        h = hashlib.sha256()
        h.update("\n".join(self.catalog.ids.tolist()).encode())
        for sp in self.splits:
            h.update(f"{sp.user_id}|{sp.cut_index}|{sp.t_cut}|{','.join(sp.targets)}".encode())
            h.update(np.asarray(sp.candidate_pool, dtype=np.int32).tobytes())
        for th in self.train_histories:
            h.update(f"{th.user_id}:{len(th)}".encode())
        return h.hexdigest()


def split_dataset(catalog: Catalog, histories, ev: EvalConfig = EvalConfig(),
                  policy: ValidityPolicy = ValidityPolicy(), seed: int = 0) -> Dataset:
    rng = np.random.default_rng([seed, 7])
    splits, train_h, reasons = [], [], {}
    for h in histories:
        ok, why = validate_user(h, policy)
        if not ok:
            reasons[why] = reasons.get(why, 0) + 1
            continue
        try:
            sp = temporal_split(h, rng, catalog, ev.pool_size, ev.min_prefix, ev.n_targets)
        except SplitUnavailable:
            train_h.append(h)
            continue
        splits.append(sp)
        train_h.append(sp.input_history())
    return Dataset(catalog, splits, train_h, sum(reasons.values()), reasons)


def synthetic_dataset(cfg: ExperimentConfig, seed: int = 0) -> Dataset:
    catalog, users = generate_synthetic(cfg.generator, seed)
    return split_dataset(catalog, users, cfg.eval, cfg.policy, seed)


def load_dataset(data_dir, cfg: ExperimentConfig, seed: int = 0) -> Dataset:
    data_dir = Path(data_dir)
    with open(data_dir / "catalog.jsonl", "rb") as f:
        catalog = Catalog.load(f)
    with open(data_dir / "events.jsonl", "rb") as f:
        parsed = parse_log(f)
    return split_dataset(catalog, parsed.users, cfg.eval, cfg.policy, seed)


def build_model(cfg: ExperimentConfig, seed: int | None = None,
                strategy: MixStrategy | None = None) -> TwoTowerModel:
    seed = cfg.train.seed if seed is None else seed
    return TwoTowerModel(cfg.item, cfg.user, seed=seed, tau_init=cfg.train.tau_init,
                         strategy=strategy or cfg.strategy)


def fit(dataset: Dataset, cfg: ExperimentConfig, seed: int | None = None,
        strategy: MixStrategy | None = None, stats_stream=None,
        feats: ItemFeatures | None = None) -> TrainResult:
    seed = cfg.train.seed if seed is None else seed
    model = build_model(cfg, seed, strategy)
    feats = feats or ItemFeatures.from_catalog(dataset.catalog, cfg.item)
    return train(dataset.train_histories, dataset.catalog, model, replace(cfg.train, seed=seed),
                 MixQuota.scaled(cfg.user.last_n), stats_stream, feats)


# ---------------------------------------------------------------------------
# ablations


@dataclass(frozen=True)
class AblationCell:
    label: str
    strategy: MixStrategy = MixStrategy.TWO_D
    window: int | None = None
    queries_per_scenario: int | None = None
    last_n: int | None = None

    def apply(self, cfg: ExperimentConfig) -> ExperimentConfig:
        u = cfg.user
        u = replace(u, window=self.window if self.window is not None else u.window,
                    queries_per_scenario=self.queries_per_scenario or u.queries_per_scenario,
                    last_n=self.last_n or u.last_n)
        return replace(cfg, user=u, strategy=MixStrategy(self.strategy))


def mixing_cells() -> list:
    return [AblationCell(MixStrategy(s).label, MixStrategy(s)) for s in
            ("sorted_by_timestamp", "naive", "pe_seq_only", "pe_gap_only", "2d")]


@dataclass
class AblationRow:
    cell: AblationCell
    config: dict
    data_hash: str
    reports: list      # one MetricsReport per seed

    def mean(self) -> MetricsReport:
        rs = self.reports

        def avg(vals):
            vals = [v for v in vals if v is not None]
            return statistics.fmean(vals) if vals else None

        return MetricsReport(self.cell.label, rs[0].n_users, rs[0].n_skipped, rs[0].pool_size,
                             {k: avg([r.hr[k] for r in rs]) for k in rs[0].hr},
                             {k: avg([r.ndcg[k] for r in rs]) for k in rs[0].ndcg},
                             avg([r.mrr for r in rs]))

    def to_dict(self) -> dict:
        return {"label": self.cell.label, "config": self.config, "data_hash": self.data_hash,
                "seeds": [r.to_dict() for r in self.reports], "mean": self.mean().to_dict()}


@dataclass
class AblationReport:
    scenario: str
    rows: list

    def to_json(self) -> str:
        return json.dumps({"scenario": self.scenario, "rows": [r.to_dict() for r in self.rows]},
                          sort_keys=True, indent=1)

    def table(self) -> str:
        means = [r.mean() for r in self.rows]
        if not means:
            return "(no cells)"
        return format_table([m.row() for m in means], [m.label for m in means], means[0].header())


def run_ablation_suite(dataset: Dataset, cfg: ExperimentConfig, cells, seeds=(0,),
                       sc: ScenarioConfig | None = None, log=None) -> AblationReport:
    """Train and evaluate every cell on the same dataset and seeds."""
    sc = sc or ScenarioConfig.of(SCENARIOS, Scenario.ADS)
    data_hash = dataset.data_hash
    rows = []
    for cell in cells:
        ccfg = cell.apply(cfg)
        feats = ItemFeatures.from_catalog(dataset.catalog, ccfg.item)
        reports = []
        for seed in seeds:
            res = fit(dataset, ccfg, seed, feats=feats)
            rep = evaluate(res.model, dataset.splits, sc, cache=EmbeddingCache(res.model, feats),
                           quota=MixQuota.scaled(ccfg.user.last_n))
            rep.label = cell.label
            reports.append(rep)
            if log:
                log(f"{cell.label} seed={seed} HR@100={rep.hr[100]:.4f}")
        rows.append(AblationRow(cell, ccfg.to_dict(), data_hash, reports))
    return AblationReport(sc.label, rows)
