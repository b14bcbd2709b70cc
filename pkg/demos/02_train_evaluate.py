"""Train a small two-tower model and evaluate it per scenario configuration.

Uses a reduced world (800 users) so the script runs in about a minute on one
core.  The full-size settings are the ExperimentConfig defaults.
"""

from dataclasses import replace

from crossrec.encoders import ItemFeatures
from crossrec.evaluation import EmbeddingCache, ScenarioConfig, evaluate, format_table
from crossrec.events import SCENARIOS, GeneratorConfig, Scenario
from crossrec.experiment import EvalConfig, ExperimentConfig, fit, synthetic_dataset

HF, ADS, SR = Scenario.HOMEFEED, Scenario.ADS, Scenario.SEARCH

cfg = replace(ExperimentConfig(), generator=GeneratorConfig(n_users=800, n_items=5000),
              eval=EvalConfig(pool_size=2000))
ds = synthetic_dataset(cfg, seed=0)
print(f"{len(ds.splits)} evaluation users, {ds.n_invalid} rejected by the validity policy")

res = fit(ds, cfg, seed=0)
for e in res.epochs:
    print(f"epoch {e['epoch']}: loss {e['loss']:.3f}  tau {e['tau']:.2f}")

feats = ItemFeatures.from_catalog(ds.catalog, cfg.item)
cache = EmbeddingCache(res.model, feats)
reports = [evaluate(res.model, ds.splits, sc, cache=cache)
           for sc in (ScenarioConfig.of([HF], HF), ScenarioConfig.of([HF, SR], HF),
                      ScenarioConfig.of(SCENARIOS, ADS))]
print()
print(format_table([r.row() for r in reports], [r.label for r in reports], reports[0].header()))
print(f"\nrandom ranking would give HR@10 = {10 / cfg.eval.pool_size:.4f}")
