"""Recall stage: index every item once, then answer top-k queries by exact scan.

Also measures serving throughput for three tower widths; wider towers encode
fewer users per second.
"""

import time
from dataclasses import replace

from crossrec.encoders import ItemFeatures, TwoTowerModel
from crossrec.evaluation import EmbeddingCache, encode_users
from crossrec.events import GeneratorConfig, generate_synthetic
from crossrec.experiment import ExperimentConfig
from crossrec.retrieval import BenchConfig, ItemIndex, bench, build_index, topk

catalog, users = generate_synthetic(GeneratorConfig(n_users=64, n_items=20000), seed=0)
cfg = ExperimentConfig()
model = TwoTowerModel(cfg.item, cfg.user, seed=0)

t0 = time.perf_counter()
index = build_index(model, catalog)
index.save("/tmp/demo_items.redx")
index = ItemIndex.load("/tmp/demo_items.redx")
print(f"indexed {len(index)} items at d={index.d} in {time.perf_counter() - t0:.1f}s")

feats = ItemFeatures.from_catalog(catalog, cfg.item)
h = users[0]
R = encode_users(model, [h], [h.timeline()[-1].timestamp + 1], EmbeddingCache(model, feats))[0]
print(f"user {h.user_id}: {R.shape[0]} interest vectors")
for item, score in topk(index, R, 5):
    print(f"  {item}  score {score:.4f}  topic {catalog[item].topic}")

ts = [u.timeline()[-1].timestamp + 1 for u in users]
for d in (32, 64, 128):
    m = TwoTowerModel(replace(cfg.item, d=d), replace(cfg.user, d=d), seed=0)
    f = ItemFeatures.from_catalog(catalog, m.item_cfg)
    rep = bench(m, build_index(m, f), users, ts, f, BenchConfig(iterations=2))
    print(f"d={d:>3}: encode {rep.encode_sps:7.1f} users/s, retrieve {rep.retrieve_sps:7.1f} users/s, "
          f"p99 {rep.p99_ms:.2f} ms")
