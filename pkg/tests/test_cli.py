import json
from dataclasses import asdict

import pytest

from crossrec.cli import EXIT_DATA, EXIT_NUMERIC, EXIT_OK, EXIT_USAGE, main
from crossrec.mixer import MixStrategy

from conftest import TINY_GEN, TINY_ITEM, TINY_USER


def tiny_config():
    user = asdict(TINY_USER)
    user["action_channels"] = list(user["action_channels"])
    gen = asdict(TINY_GEN)
    gen = {k: list(v) if isinstance(v, tuple) else v for k, v in gen.items()}
    return {"generator": gen, "item": asdict(TINY_ITEM), "user": user,
            "train": {"epochs": 1, "batch_size": 8, "negatives": 20, "lr": 3e-3},
            "eval": {"pool_size": 50, "min_prefix": 16},
            "policy": {"min_homefeed_clicks": 0, "min_ads_clicks": 0, "min_click_duration_s": 0}}


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cfg.json"
    cfg.write_text(json.dumps(tiny_config()))
    base = ["--config", str(cfg), "--data-dir", str(root / "data"), "--threads", "1"]
    assert main(base + ["generate"]) == EXIT_OK
    assert main(base + ["train", "--out", str(root / "m.xrck"), "--stats", str(root / "s.jsonl")]) == EXIT_OK
    return root, base


class TestCli:
    def test_train_outputs(self, workspace):
        root, _ = workspace
        assert (root / "m.xrck").read_bytes()[:4] == b"XRCK"
        assert all(json.loads(l)["loss"] > 0 for l in (root / "s.jsonl").read_text().splitlines())

    def test_train_deterministic(self, workspace):
        root, base = workspace
        assert main(base + ["train", "--out", str(root / "m2.xrck")]) == EXIT_OK
        assert (root / "m2.xrck").read_bytes() == (root / "m.xrck").read_bytes()

    def test_eval_and_report(self, workspace, capsys):
        root, base = workspace
        out = root / "e.json"
        rc = main(base + ["eval", "--model", str(root / "m.xrck"), "--inputs", "homefeed,search",
                          "--target", "homefeed", "--out", str(out)])
        assert rc == EXIT_OK
        rep = json.loads(out.read_text())
        assert rep["label"] == "Search + Homefeed (for Homefeed)"
        assert 0 <= rep["hr"]["10"] <= rep["hr"]["50"] <= 1
        capsys.readouterr()
        assert main(["report", str(out)]) == EXIT_OK
        assert "Search + Homefeed (for Homefeed)" in capsys.readouterr().out

    def test_index_retrieve(self, workspace, capsys):
        root, base = workspace
        idx = root / "items.redx"
        assert main(base + ["index", "--model", str(root / "m.xrck"), "--out", str(idx)]) == EXIT_OK
        assert idx.read_bytes()[:4] == b"REDX"
        user = json.loads((root / "data" / "events.jsonl").read_text().splitlines()[0])["user_id"]
        capsys.readouterr()
        rc = main(base + ["retrieve", "--model", str(root / "m.xrck"), "--index", str(idx), "--user", user, "-k", "5"])
        assert rc == EXIT_OK
        lines = [json.loads(l) for l in capsys.readouterr().out.splitlines()]
        assert [l["rank"] for l in lines] == [1, 2, 3, 4, 5]
        assert all(a["score"] >= b["score"] for a, b in zip(lines, lines[1:]))

    def test_bench(self, workspace):
        root, base = workspace
        out = root / "b.json"
        rc = main(base + ["bench", "--widths", "8,16", "--batch", "4", "--iterations", "1", "--warmup", "0",
                          "--out", str(out)])
        assert rc == EXIT_OK
        reps = json.loads(out.read_text())
        assert [r["d"] for r in reps] == [8, 16]

    def test_ablate(self, workspace):
        root, base = workspace
        out = root / "a.json"
        assert main(base + ["ablate", "--seeds", "0", "--inputs", "homefeed", "--target", "homefeed",
                            "--out", str(out)]) == EXIT_OK
        rows = json.loads(out.read_text())["rows"]
        assert [r["label"] for r in rows] == [MixStrategy(s).label for s in
                                              ("sorted_by_timestamp", "naive", "pe_seq_only", "pe_gap_only", "2d")]


class TestExitCodes:
    def test_usage(self):
        assert main([]) == EXIT_USAGE
        assert main(["frobnicate"]) == EXIT_USAGE
        assert main(["--threads", "0", "generate"]) == EXIT_USAGE
        assert main(["eval", "--target", "nowhere"]) == EXIT_USAGE

    def test_help(self, capsys):
        assert main(["--help"]) == EXIT_OK
        out = capsys.readouterr().out
        for cmd in ("generate", "train", "eval", "ablate", "index", "retrieve", "bench", "report"):
            assert cmd in out

    def test_bad_config(self, tmp_path):
        p = tmp_path / "c.json"
        p.write_text('{"nope": 1}')
        assert main(["--config", str(p), "generate"]) == EXIT_USAGE

    def test_missing_data(self, tmp_path):
        assert main(["--data-dir", str(tmp_path), "train"]) == EXIT_DATA

    def test_corrupt_model(self, workspace, tmp_path):
        _, base = workspace
        bad = tmp_path / "bad.xrck"
        bad.write_bytes(b"garbage")
        assert main(base + ["eval", "--model", str(bad)]) == EXIT_DATA

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_numeric_failure(self, workspace, tmp_path, monkeypatch):
        root, base = workspace
        import crossrec.experiment as ex
        from crossrec.encoders import TwoTowerModel
        m = TwoTowerModel.load(root / "m.xrck")
        m.user.queries.data[:] = float("nan")
        monkeypatch.setattr(ex, "build_model", lambda *a, **k: m)
        assert main(base + ["train", "--out", str(tmp_path / "x")]) == EXIT_NUMERIC
