import logging
import struct
from dataclasses import replace

import numpy as np
import pytest

from crossrec.encoders import TwoTowerModel
from crossrec.evaluation import rank_candidates
from crossrec.retrieval import (BenchConfig, IndexFormatError, ItemIndex, ThroughputReport, bench,
                                build_index, topk)

from conftest import TINY_ITEM, TINY_USER
from oracles import reference_topk


def unit(rng, n, d):
    x = rng.standard_normal((n, d))
    return x / np.linalg.norm(x, axis=1, keepdims=True)


def random_index(rng, M, d):
    ids = [f"it{j:05d}" for j in rng.permutation(M)]
    return ItemIndex(ids, unit(rng, M, d))


class TestIndex:
    def test_single_item(self, tiny_world, tiny_model):
        _, _, feats = tiny_world
        one = type(feats)(feats.ids[:1], feats.tokens[:1], feats.lengths[:1], feats.visual[:1],
                          {feats.ids[0]: 0})
        idx = build_index(tiny_model, one)
        assert idx.emb.shape == (1, TINY_ITEM.d)
        np.testing.assert_array_equal(idx.emb[0], tiny_model.item.encode_rows(feats, [0]).data[0].astype("<f4"))

    def test_rebuild_byte_identical(self, tiny_world, tiny_model, tmp_path):
        catalog, _, _ = tiny_world
        build_index(tiny_model, catalog).save(tmp_path / "a.redx")
        build_index(tiny_model, catalog).save(tmp_path / "b.redx")
        assert (tmp_path / "a.redx").read_bytes() == (tmp_path / "b.redx").read_bytes()

    def test_round_trip_bitwise(self, tiny_world, tiny_model, tmp_path):
        catalog, _, _ = tiny_world
        idx = build_index(tiny_model, catalog, timestamp=1_700_000_000)
        idx.save(tmp_path / "x.redx")
        back = ItemIndex.load(tmp_path / "x.redx")
        assert back.emb.tobytes() == idx.emb.tobytes()
        assert back.ids.tolist() == idx.ids.tolist()
        assert back.model_hash == tiny_model.model_hash()
        assert back.timestamp == 1_700_000_000

    def test_file_size_arithmetic(self):
        M, d = 100_000, 64
        ids = [f"{j:08d}" for j in range(M)]
        raw = ItemIndex(ids, np.ones((M, d))).to_bytes()
        header = 4 + 2 + 8 + 4 + 32 + 8
        assert len(raw) == header + M * (2 + 8) + M * d * 4

    def test_layout(self):
        raw = ItemIndex(["ab"], np.array([[0.6, 0.8]]), b"h" * 32, 7).to_bytes()
        assert raw[:4] == b"REDX"
        assert struct.unpack_from("<HQI", raw, 4) == (1, 1, 2)
        assert raw[18:50] == b"h" * 32
        assert struct.unpack_from("<q", raw, 50) == (7,)
        assert raw[58:62] == b"\x02\x00ab"
        assert raw[62:] == np.array([0.6, 0.8], dtype="<f4").tobytes()

    def test_duplicate_ids_listed(self):
        with pytest.raises(IndexFormatError, match="'b'"):
            ItemIndex(["a", "b", "b"], np.eye(3))

    @pytest.mark.parametrize("mutate", [
        lambda r: b"XXXX" + r[4:],
        lambda r: r[:-1],
        lambda r: r[:4] + b"\x09\x00" + r[6:],
        lambda r: r[:20],
    ])
    def test_corruption(self, mutate):
        raw = ItemIndex(["a", "b"], np.eye(2)).to_bytes()
        with pytest.raises(IndexFormatError):
            ItemIndex.from_bytes(mutate(raw))

    def test_immutable(self):
        idx = ItemIndex(["a"], np.array([[1.0, 0.0]]))
        with pytest.raises(ValueError):
            idx.emb[0, 0] = 2.0

    def test_visual_mismatch(self, tiny_world):
        _, _, feats = tiny_world
        model = TwoTowerModel(replace(TINY_ITEM, visual_dim=3), TINY_USER)
        with pytest.raises(IndexFormatError, match="visual"):
            build_index(model, feats)


class TestTopK:
    def test_exact_vector_ranks_first(self):
        rng = np.random.default_rng(0)
        idx = random_index(rng, 50, 8)
        q = idx.emb[17].astype(np.float64)
        (top_id, score), = topk(idx, q, 1)
        assert top_id == idx.ids[17]
        assert score == pytest.approx(1.0, abs=1e-12)

    def test_full_ranking_matches_rank_candidates(self):
        rng = np.random.default_rng(1)
        idx = random_index(rng, 60, 4)
        q = rng.standard_normal((3, 4))
        got = topk(idx, q, 60)
        ref = rank_candidates(dict(zip(idx.ids.tolist(), idx.scores(q).tolist())))
        assert [i for i, _ in got] == [i for i, _ in ref]

    def test_random_instances_match_reference(self):
        rng = np.random.default_rng(2)
        for n in range(200):
            M = int(rng.integers(1, 300)) if n else 1000
            d = int(rng.integers(2, 12))
            idx = random_index(rng, M, d)
            q = rng.standard_normal((9, d))
            k = min(10, M)
            ref = reference_topk(idx.ids.tolist(), idx.emb.astype(np.float64), q, k)
            assert [i for i, _ in topk(idx, q, k)] == ref

    def test_ties_by_ascending_id(self):
        idx = ItemIndex(["c", "a", "b", "d"], np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 0.0]]))
        assert [i for i, _ in topk(idx, np.array([1.0, 0.0]), 3)] == ["a", "c", "d"]

    def test_partition_independent(self):
        rng = np.random.default_rng(3)
        idx = random_index(rng, 5000, 16)
        q = rng.standard_normal((6, 16))
        whole = topk(idx, q, 50)
        for chunk, workers in ((777, 1), (1024, 3), (64, 2)):
            assert topk(idx, q, 50, workers=workers, chunk=chunk) == whole
        s_whole = idx.scores(q)
        s_parts = np.concatenate([idx.scores(q, np.arange(lo, min(5000, lo + 333))) for lo in range(0, 5000, 333)])
        assert s_whole.tobytes() == s_parts.tobytes()

    def test_k_clamped(self, caplog):
        idx = random_index(np.random.default_rng(4), 5, 3)
        with caplog.at_level(logging.WARNING, logger="crossrec.retrieval"):
            out = topk(idx, np.ones(3), 9)
        assert len(out) == 5
        assert "clamping" in caplog.text

    def test_k_non_positive(self):
        with pytest.raises(ValueError):
            topk(random_index(np.random.default_rng(5), 5, 3), np.ones(3), 0)


class TestBench:
    def test_zero_iterations(self):
        with pytest.raises(ValueError):
            BenchConfig(iterations=0)

    def test_report(self, tiny_world, tiny_model):
        catalog, users, feats = tiny_world
        idx = build_index(tiny_model, feats)
        ts = [h.timeline()[-1].timestamp + 1 for h in users[:8]]
        rep = bench(tiny_model, idx, users[:8], ts, feats, BenchConfig(iterations=2, warmup=1, k=10, workers=2))
        assert isinstance(rep, ThroughputReport)
        assert rep.encode_sps > 0 and rep.retrieve_sps > 0 and rep.total_sps > 0
        assert rep.p50_ms <= rep.p95_ms <= rep.p99_ms
        assert rep.batch_size == 8 and rep.d == TINY_USER.d and rep.K == TINY_USER.K
        assert '"encode_sps"' in rep.to_json()

    def test_empty_batch(self, tiny_world, tiny_model):
        _, _, feats = tiny_world
        with pytest.raises(ValueError):
            bench(tiny_model, build_index(tiny_model, feats), [], [], feats)
