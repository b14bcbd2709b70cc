"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("crossrec")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _scenarios(text: str):
    from .events import parse_scenario
    try:
        return [parse_scenario(s.strip()) for s in text.split(",") if s.strip()]
    except ValueError as e:
        raise UsageError(str(e)) from None


def _config(args):
    from .experiment import ExperimentConfig
    if args.config is None:
        cfg = ExperimentConfig()
    else:
        try:
            cfg = ExperimentConfig.load(args.config)
        except (OSError, json.JSONDecodeError, TypeError, ValueError) as e:
            raise UsageError(f"bad config {args.config}: {e}") from None
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _dataset(args, cfg):
    from .experiment import load_dataset
    d = Path(args.data_dir)
    if not (d / "catalog.jsonl").exists() or not (d / "events.jsonl").exists():
        raise DataError(f"{d} has no catalog.jsonl/events.jsonl; run `generate` first")
    ds = load_dataset(d, cfg, seed=0)
    if not ds.train_histories:
        raise DataError(f"no valid users in {d} ({ds.n_invalid} rejected)")
    return ds


def _model(path):
    from .encoders import TwoTowerModel
    if path is None:
        raise UsageError("--model is required")
    return TwoTowerModel.load(path)


def _emit(obj, out):
    text = obj if isinstance(obj, str) else json.dumps(obj, sort_keys=True, indent=1)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


# ---------------------------------------------------------------------------
# subcommands


def cmd_generate(args, cfg):
    from .events import generate_synthetic, serialize_log
    catalog, users = generate_synthetic(cfg.generator, args.seed or 0)
    d = Path(args.data_dir)
    d.mkdir(parents=True, exist_ok=True)
    with open(d / "catalog.jsonl", "w") as f:
        catalog.dump(f)
    with open(d / "events.jsonl", "w") as f:
        serialize_log(users, f)
    print(f"wrote {len(catalog)} items and {len(users)} users to {d}")


def cmd_train(args, cfg):
    from .experiment import fit
    from .mixer import MixStrategy
    ds = _dataset(args, cfg)
    strategy = MixStrategy(args.strategy) if args.strategy else None
    stats = open(args.stats, "w") if args.stats else None
    try:
        res = fit(ds, cfg, strategy=strategy, stats_stream=stats)
    finally:
        if stats:
            stats.close()
    res.model.save(args.out, {"data_hash": ds.data_hash})
    print(json.dumps({"model": str(args.out), "checksum": res.model.checksum(), "epochs": res.epochs}))


def cmd_eval(args, cfg):
    from .encoders import ItemFeatures
    from .evaluation import EmbeddingCache, ScenarioConfig, evaluate
    from .mixer import MixQuota
    model = _model(args.model)
    ds = _dataset(args, cfg)
    sc = ScenarioConfig.of(_scenarios(args.inputs), _scenarios(args.target)[0])
    feats = ItemFeatures.from_catalog(ds.catalog, model.item_cfg)
    rep = evaluate(model, ds.splits, sc, cache=EmbeddingCache(model, feats),
                   quota=MixQuota.scaled(model.user_cfg.last_n))
    _emit(rep.to_dict(), args.out)


def cmd_ablate(args, cfg):
    from .evaluation import ScenarioConfig
    from .experiment import mixing_cells, run_ablation_suite
    ds = _dataset(args, cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    sc = ScenarioConfig.of(_scenarios(args.inputs), _scenarios(args.target)[0])
    rep = run_ablation_suite(ds, cfg, mixing_cells(), seeds, sc, log=lambda m: print(m, file=sys.stderr))
    _emit(rep.to_json(), args.out)
    print(rep.table(), file=sys.stderr)


def cmd_index(args, cfg):
    from .retrieval import build_index
    from .events import Catalog
    model = _model(args.model)
    with open(Path(args.data_dir) / "catalog.jsonl", "rb") as f:
        catalog = Catalog.load(f)
    idx = build_index(model, catalog, timestamp=args.timestamp)
    idx.save(args.out)
    print(f"indexed {len(idx)} items (d={idx.d}) into {args.out}")


def cmd_retrieve(args, cfg):
    from .encoders import ItemFeatures
    from .evaluation import EmbeddingCache, encode_users
    from .events import Catalog, parse_log
    from .retrieval import ItemIndex, topk
    model = _model(args.model)
    idx = ItemIndex.load(args.index)
    if idx.model_hash != model.model_hash():
        log.warning("index was built with a different item tower")
    d = Path(args.data_dir)
    with open(d / "catalog.jsonl", "rb") as f:
        catalog = Catalog.load(f)
    with open(d / "events.jsonl", "rb") as f:
        users = {h.user_id: h for h in parse_log(f).users}
    if args.user not in users:
        raise DataError(f"unknown user {args.user}")
    h = users[args.user]
    if args.inputs:
        h = h.restrict(_scenarios(args.inputs))
    t = h.timeline()[-1].timestamp + 1 if len(h) else 0
    R = encode_users(model, [h], [t], EmbeddingCache(model, ItemFeatures.from_catalog(catalog, model.item_cfg)))[0]
    for rank, (item, score) in enumerate(topk(idx, R, args.k), 1):
        print(json.dumps({"rank": rank, "item_id": item, "score": score}))


def cmd_bench(args, cfg):
    from .encoders import ItemFeatures, TwoTowerModel
    from .retrieval import BenchConfig, bench, build_index
    ds = _dataset(args, cfg)
    users = ds.train_histories[:args.batch]
    ts = [h.timeline()[-1].timestamp + 1 for h in users]
    bcfg = BenchConfig(args.iterations, args.warmup, args.k, args.threads or 1)
    if args.widths:
        models = [TwoTowerModel(replace(cfg.item, d=w), replace(cfg.user, d=w), seed=cfg.train.seed)
                  for w in (int(x) for x in args.widths.split(","))]
    else:
        models = [_model(args.model)]
    out = []
    for m in models:
        feats = ItemFeatures.from_catalog(ds.catalog, m.item_cfg)
        rep = bench(m, build_index(m, feats), users, ts, feats, bcfg)
        out.append(rep.to_dict())
        print(rep.to_json(), file=sys.stderr)
    _emit(out, args.out)


def cmd_report(args, cfg):
    from .evaluation import MetricsReport, format_table
    rows, labels, header = [], [], None
    for p in args.inputs:
        try:
            obj = json.loads(Path(p).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise DataError(f"{p}: {e}") from None
        dicts = [r["mean"] for r in obj["rows"]] if "rows" in obj else [obj]
        for d in dicts:
            rep = MetricsReport(d["label"], d["n_users"], d["n_skipped"], d["pool_size"],
                                {int(k): v for k, v in d["hr"].items()},
                                {int(k): v for k, v in d["ndcg"].items()}, d["mrr"])
            rows.append(rep.row())
            labels.append(rep.label)
            header = header or rep.header()
    if not rows:
        raise DataError("no reports found")
    print(format_table(rows, labels, header))


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="crossrec", description="Cross-scenario two-tower recall model.")
    p.add_argument("--config", help="experiment config JSON")
    p.add_argument("--seed", type=int, help="training / generation seed")
    p.add_argument("--threads", type=int, help="BLAS and bench worker threads")
    p.add_argument("--data-dir", default="data", help="directory holding catalog.jsonl and events.jsonl")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    sub.add_parser("generate", help="write a synthetic catalog and event log")

    s = sub.add_parser("train", help="train a model")
    s.add_argument("--out", default="model.xrck")
    s.add_argument("--strategy", help="mixing strategy (overrides the config)")
    s.add_argument("--stats", help="JSONL file for per-step training stats")

    for name, hlp in (("eval", "evaluate a model"), ("ablate", "run the mixing ablation")):
        s = sub.add_parser(name, help=hlp)
        if name == "eval":
            s.add_argument("--model")
        else:
            s.add_argument("--seeds", default="0,1,2")
        s.add_argument("--inputs", default="homefeed,ads,search")
        s.add_argument("--target", default="ads")
        s.add_argument("--out")

    s = sub.add_parser("index", help="build the item embedding index")
    s.add_argument("--model")
    s.add_argument("--out", default="items.redx")
    s.add_argument("--timestamp", type=int, default=0)

    s = sub.add_parser("retrieve", help="top-k items for one user")
    s.add_argument("--model")
    s.add_argument("--index", required=True)
    s.add_argument("--user", required=True)
    s.add_argument("--inputs", help="restrict the history to these scenarios")
    s.add_argument("-k", type=int, default=10)

    s = sub.add_parser("bench", help="serving throughput")
    s.add_argument("--model")
    s.add_argument("--widths", help="comma-separated d values for fresh models instead of --model")
    s.add_argument("--batch", type=int, default=64)
    s.add_argument("--iterations", type=int, default=5)
    s.add_argument("--warmup", type=int, default=3)
    s.add_argument("-k", type=int, default=100)
    s.add_argument("--out")

    s = sub.add_parser("report", help="tabulate eval/ablate JSON outputs")
    s.add_argument("inputs", nargs="+")
    return p


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "eval": cmd_eval, "ablate": cmd_ablate,
            "index": cmd_index, "retrieve": cmd_retrieve, "bench": cmd_bench, "report": cmd_report}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads is not None and args.threads < 1:
        print("crossrec: --threads must be >= 1", file=sys.stderr)
        return EXIT_USAGE

    from threadpoolctl import threadpool_limits

    from .events import SplitUnavailable
    from .numerics import CheckpointError
    from .retrieval import IndexFormatError
    from .training import TrainingError

    try:
        cfg = _config(args)
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(f"crossrec: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingError, FloatingPointError) as e:
        print(f"crossrec: numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, IndexFormatError, SplitUnavailable, OSError,
            json.JSONDecodeError, KeyError, ValueError) as e:
        print(f"crossrec: data error: {e}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
