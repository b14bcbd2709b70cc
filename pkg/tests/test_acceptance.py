"""Acceptance criteria 1-10, each printed as one PASS/FAIL line.

Criteria 6-8 share one training sweep on the default synthetic dataset
(3 seeds for each of the 2d and sorted-by-timestamp strategies), which takes
tens of minutes on one core.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest
from threadpoolctl import threadpool_limits

from crossrec import numerics as nx
from crossrec.assign import max_similarity_assignment
from crossrec.encoders import ItemFeatures, TwoTowerModel
from crossrec.evaluation import EmbeddingCache, ScenarioConfig, evaluate, hit_rate, mrr, ndcg
from crossrec.events import SCENARIOS, GeneratorConfig, Scenario, generate_synthetic
from crossrec.experiment import EvalConfig, ExperimentConfig, fit, split_dataset, synthetic_dataset
from crossrec.losses import nce_loss, sample_negatives
from crossrec.mixer import MixQuota, MixStrategy, build_batch, fuse_features, mix
from crossrec.mixer import MixerTables
from crossrec.retrieval import BenchConfig, ItemIndex, bench, build_index, topk
from crossrec.training import TrainConfig, make_sample

from conftest import TINY_ITEM, TINY_USER
from oracles import (brute_assignment, brute_hr, brute_mrr, brute_ndcg, composed_loss_grad_check,
                     op_cases, random_history, reference_topk)
from test_mixer import generic_history, reference_mix

SEEDS = (0, 1, 2)
HF, ADS, SR = Scenario.HOMEFEED, Scenario.ADS, Scenario.SEARCH


@pytest.fixture
def verdict(capsys):
    def emit(n, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'}: {detail}")
        assert ok, detail
    return emit


def test_criterion_01_metric_oracles(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(0)
    worst = 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 10))
        ranks = [list(rng.choice(2000, size=int(rng.integers(1, 4)), replace=False) + 1) for _ in range(n)]
        for k in (10, 50, 100, 1000):
            worst = max(worst, abs(hit_rate(ranks, k) - brute_hr(ranks, k)),
                        abs(ndcg(ranks, k) - brute_ndcg(ranks, k)))
        worst = max(worst, abs(mrr(ranks, 1000) - brute_mrr(ranks, 1000)))
    worked = (hit_rate([[3], [15]], 10), ndcg([[4]], 10), mrr([[4]]))
    dt = time.perf_counter() - t0
    ok = (worst <= 1e-12 and worked[0] == 0.5 and abs(worked[1] - 0.430677) < 1e-6
          and worked[2] == 0.25 and dt < 10)
    verdict(1, ok, f"max |err| {worst:.1e}, worked {worked[0]}, {worked[1]:.6f}, {worked[2]}, {dt:.1f}s")


def test_criterion_02_hungarian(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    bad = 0
    for n in range(500):
        s, K = (int(x) for x in rng.integers(1, 7, 2))
        if n % 3 == 2:
            sim = rng.integers(0, 3, (s, K)).astype(float) / 2   # degenerate ties
        else:
            sim = rng.uniform(-1, 1, (s, K))
        best, key = brute_assignment(sim)
        m = max_similarity_assignment(sim)
        total = sum(sim[r, c] for r, c in sorted(m.assignment.items()))
        bad += total != best or m.as_tuple(s) != key
    dt = time.perf_counter() - t0
    verdict(2, bad == 0 and dt < 30, f"{500 - bad}/500 exact matches, {dt:.1f}s")


def test_criterion_03_gradients(verdict, tiny_world):
    t0 = time.perf_counter()
    worst = {}
    for point in range(100):
        for name, fn, inputs, elementwise in op_cases(np.random.default_rng([3, point])):
            err = nx.grad_check(fn, inputs)
            worst[name] = max(worst.get(name, 0.0), err)
    elem = {c[0] for c in op_cases(np.random.default_rng(0)) if c[3]}
    op_ok = all(v < (1e-4 if k in elem else 1e-3) for k, v in worst.items())
    _, users, feats = tiny_world
    model = TwoTowerModel(TINY_ITEM, TINY_USER, seed=1)
    rng = np.random.default_rng(0)
    q = MixQuota.scaled(TINY_USER.last_n)
    smps = [s for s in (make_sample(h, TINY_USER.window, q, MixStrategy.TWO_D, np.random.default_rng(i))
                        for i, h in enumerate(users[:4])) if s is not None][:2]
    negs = sample_negatives(len(feats.ids), 6, set(), rng).rows
    comp = composed_loss_grad_check(model, smps, feats, negs, TrainConfig(), rng)
    comp_worst = max(comp.values())
    dt = time.perf_counter() - t0
    ok = op_ok and comp_worst < 1e-3 and dt < 120
    verdict(3, ok, f"{len(worst)} ops worst {max(worst.values()):.1e}, composed loss "
                   f"({len(comp)} blocks) worst {comp_worst:.1e}, {dt:.1f}s")


def test_criterion_04_mixer(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    strategies = list(MixStrategy)
    fails = 0
    for n in range(10_000):
        h = random_history(rng, 60, ts_span=int(rng.choice([300, 10**6])))
        q = MixQuota(*(int(x) for x in rng.integers(0, [24, 8, 8])))
        st = strategies[n % len(strategies)]
        seq = mix(h, q, st)
        evs = [e.event for e in seq.entries]
        ts = [e.timestamp for e in evs]
        counts = seq.counts()
        ok = (evs == reference_mix(h, q, st) and len(seq) <= q.last_n and ts == sorted(ts)
              and (not st.uses_quota or all(counts[s] <= q.for_scenario(s) for s in SCENARIOS)))
        fails += not ok
    # additivity of the fused input and distinct strategy outputs on a generic history
    h = generic_history()
    frng = np.random.default_rng(5)
    tables = MixerTables(8, 128, frng)
    ids = sorted({e.item_id for e in h.timeline()})
    row = {x: i for i, x in enumerate(ids)}
    items = nx.Tensor(frng.standard_normal((len(ids), 8)))
    outs, additive = {}, True
    parts = ["item", "action", "hour", "scenario", "position"]
    for st in strategies:
        b = build_batch([mix(h, MixQuota(), st)], row)
        outs[st] = fuse_features(b, items, tables, st).data
        summed = sum(fuse_features(b, items, tables, st, [p]).data for p in parts)
        additive &= bool(np.allclose(summed, outs[st], atol=1e-12))
    distinct = all(outs[a].shape != outs[b].shape or not np.allclose(outs[a], outs[b])
                   for i, a in enumerate(strategies) for b in strategies[i + 1:])
    dt = time.perf_counter() - t0
    ok = fails == 0 and additive and distinct and dt < 30
    verdict(4, ok, f"{10_000 - fails}/10000 histories hold, additive={additive}, "
                   f"5 strategies distinct={distinct}, {dt:.1f}s")


def test_criterion_05_nce(verdict):
    loss, _ = nce_loss([1.0, 0.0], [1.0, 0.0], [[-1.0, 0.0]], 1.0, with_grad=False)
    rng = np.random.default_rng(5)
    bad = 0
    for _ in range(1000):
        d, m = int(rng.integers(2, 16)), int(rng.integers(1, 40))
        u, p, negs = rng.standard_normal(d), rng.standard_normal(d), rng.standard_normal((m, d))
        tau = float(rng.uniform(1, 100))
        a, _ = nce_loss(u, p, negs, tau, with_grad=False)
        b, _ = nce_loss(u, p, negs[rng.permutation(m)], tau, with_grad=False)
        bad += not (a >= 0 and a == b)
    ok = abs(loss - math.log1p(math.exp(-2))) <= 1e-9 and bad == 0
    verdict(5, ok, f"worked value {loss:.9f}, {1000 - bad}/1000 non-negative and permutation invariant")


# ---------------------------------------------------------------------------
# learned-model criteria


@pytest.fixture(scope="module")
def sweep():
    cfg = ExperimentConfig()
    with threadpool_limits(1):
        ds = synthetic_dataset(cfg, seed=0)
        feats = ItemFeatures.from_catalog(ds.catalog, cfg.item)
        q = MixQuota.scaled(cfg.user.last_n)
        scs = {"hf": ScenarioConfig.of([HF], HF), "hf_sr": ScenarioConfig.of([HF, SR], HF),
               "all_ads": ScenarioConfig.of(SCENARIOS, ADS)}
        out = {"2d": [], "sorted": [], "time_2d": [], "pool": ds.splits[0].candidate_pool.size}
        for seed in SEEDS:
            for key, st in (("2d", MixStrategy.TWO_D), ("sorted", MixStrategy.SORTED_BY_TIMESTAMP)):
                t0 = time.perf_counter()
                model = fit(ds, cfg, seed, st, feats=feats).model
                cache = EmbeddingCache(model, feats)
                wanted = scs if key == "2d" else {"all_ads": scs["all_ads"]}
                out[key].append({k: evaluate(model, ds.splits, sc, cache=cache, quota=q) for k, sc in wanted.items()})
                if key == "2d":
                    out["time_2d"].append(time.perf_counter() - t0)
    return out


def test_criterion_06_learning_sanity(verdict, sweep):
    hr10 = float(np.mean([r["hf"].hr[10] for r in sweep["2d"]]))
    chance = 10 / sweep["pool"]
    minutes = sum(sweep["time_2d"]) / 60
    ok = hr10 >= 5 * chance
    verdict(6, ok, f"homefeed HR@10 {hr10:.4f} = {hr10 / chance:.1f}x chance {chance:.4f} "
                   f"(3 seeds, train+eval {minutes:.1f} min on this machine)")


def test_criterion_07_cross_scenario_gain(verdict, sweep):
    hf = float(np.mean([r["hf"].hr[100] for r in sweep["2d"]]))
    both = float(np.mean([r["hf_sr"].hr[100] for r in sweep["2d"]]))
    gain = both / hf - 1
    verdict(7, gain >= 0.05, f"HR@100 homefeed-only {hf:.4f}, search+homefeed {both:.4f}, relative gain {gain:+.1%}")


def test_criterion_08_mixing_trend(verdict, sweep):
    two_d = float(np.mean([r["all_ads"].hr[100] for r in sweep["2d"]]))
    srt = float(np.mean([r["all_ads"].hr[100] for r in sweep["sorted"]]))
    users = sweep["2d"][0]["all_ads"].n_users
    verdict(8, two_d >= srt, f"all scenarios -> ads HR@100: 2d {two_d:.4f} vs sorted {srt:.4f} ({users} users)")


# ---------------------------------------------------------------------------


def test_criterion_09_retrieval(verdict, tiny_world):
    rng = np.random.default_rng(9)
    exact = 0
    for n in range(200):
        M, d = int(rng.integers(1, 400)), int(rng.integers(2, 16))
        ids = [f"it{j:05d}" for j in rng.permutation(M)]
        emb = rng.standard_normal((M, d))
        idx = ItemIndex(ids, emb / np.linalg.norm(emb, axis=1, keepdims=True))
        q = rng.standard_normal((int(rng.integers(1, 10)), d))
        k = int(rng.integers(1, 20))
        ref = reference_topk(ids and idx.ids.tolist(), idx.emb.astype(np.float64), q, min(k, M))
        exact += [i for i, _ in topk(idx, q, min(k, M))] == ref

    catalog, users = generate_synthetic(replace(GeneratorConfig(), n_users=64, n_items=2000,
                                                events_per_user=(200, 300)), 0)
    cfg = ExperimentConfig()
    sps = []
    with threadpool_limits(1):
        for d in (32, 64, 128):
            model = TwoTowerModel(replace(cfg.item, d=d), replace(cfg.user, d=d), seed=0)
            feats = ItemFeatures.from_catalog(catalog, model.item_cfg)
            index = build_index(model, feats)
            ts = [h.timeline()[-1].timestamp + 1 for h in users]
            rep = bench(model, index, users, ts, feats, BenchConfig(iterations=3, warmup=3, k=100))
            sps.append(rep.encode_sps)
    decreasing = all(a > b for a, b in zip(sps, sps[1:]))
    verdict(9, exact == 200 and decreasing,
            f"topk {exact}/200 exact; encode SPS d=32/64/128: " + " / ".join(f"{s:.0f}" for s in sps))


def test_criterion_10_determinism(verdict):
    gen = replace(GeneratorConfig(), n_users=300, n_items=3000, events_per_user=(120, 200))
    cfg = replace(ExperimentConfig(), generator=gen, eval=EvalConfig(pool_size=1000),
                  train=replace(ExperimentConfig().train, epochs=1))
    runs = []
    for _ in range(2):
        with threadpool_limits(1):
            catalog, users = generate_synthetic(gen, 0)
            ds = split_dataset(catalog, users, cfg.eval, cfg.policy, 0)
            res = fit(ds, cfg, 7)
            rep = evaluate(res.model, ds.splits, ScenarioConfig.of(SCENARIOS, HF), catalog=catalog)
            runs.append((res.checkpoint_bytes(), rep.to_json()))
    same_ck, same_rep = runs[0][0] == runs[1][0], runs[0][1] == runs[1][1]
    verdict(10, same_ck and same_rep,
            f"checkpoint bytes identical={same_ck} ({len(runs[0][0])} B), report identical={same_rep}")
