"""Command-line entry point: ``rtmoe {fetch,train,eval,analyze,reproduce}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import harness, report
from .autodiff import NumericError
from .data import DATASETS, DataError, fetch, load_dataset

EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4

# train flags that map one-to-one onto TrainConfig fields
_OVERRIDES = [
    ("--dataset", str, "dataset name (%s)" % ", ".join(DATASETS)),
    ("--lr", float, "Adam learning rate"),
    ("--epochs", int, "maximum number of epochs"),
    ("--batch-size", int, "minibatch size"),
    ("--tau", float, "Gumbel-softmax temperature for the routed model"),
    ("--patience", int, "early-stopping patience in epochs"),
    ("--clip-norm", float, "global gradient-norm clip"),
    ("--train-limit", int, "use only the first N training samples (0 = all)"),
    ("--val-fraction", float, "fraction of the training set held out for validation"),
    ("--k", int, "experts per layer for the top-k baseline"),
    ("--theta", float, "cumulative gate mass for the threshold baseline"),
    ("--layer1-input", str, "layer-1 routing input: f0 or own"),
    ("--stop-rule", str, "sequence stop rule: sample or dominant"),
    ("--init-scale", str, "routing init scale: sqrt_n or unit"),
    ("--out-dir", str, "directory that receives run folders"),
]


def _add_overrides(p: argparse.ArgumentParser) -> None:
    for flag, typ, text in _OVERRIDES:
        p.add_argument(flag, type=typ, help=text)
    p.add_argument("--standardize", action="store_true", default=None,
                   help="standardize inputs with training-set statistics")
    p.add_argument("--data-dir", help="dataset cache (default: $RTMOE_DATA or ~/.cache/rtmoe)")


def _overrides(args) -> dict:
    keys = [flag[2:].replace("-", "_") for flag, _, _ in _OVERRIDES] + ["standardize", "data_dir"]
    return {k: getattr(args, k, None) for k in keys}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="rtmoe", description="Train, evaluate and analyse "
                                "sequentially routed mixture-of-experts classifiers.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("fetch", help="download and verify a dataset")
    f.add_argument("dataset", choices=DATASETS)
    f.add_argument("--dir", help="target directory (default: $RTMOE_DATA or ~/.cache/rtmoe)")
    f.add_argument("--from", dest="source", metavar="DIR",
                   help="copy and verify files from a local directory instead of downloading")

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help="INI file with a [train] section")
    t.add_argument("--seed", type=int, help="random seed")
    t.add_argument("--model", choices=harness.MODELS, help="model kind")
    t.add_argument("--workers", type=int, help="threads used to shard each minibatch")
    t.add_argument("--dump-config", action="store_true",
                   help="print the resolved configuration and exit")
    _add_overrides(t)

    e = sub.add_parser("eval", help="evaluate a checkpoint and write per-sample records")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--seed", type=int, default=0, help="noise seed for routing draws")
    e.add_argument("--out", help="samples.jsonl path (default: next to the checkpoint)")
    e.add_argument("--data-dir", help="dataset cache")

    a = sub.add_parser("analyze", help="expert-usage and prefix-accuracy exports")
    a.add_argument("--metrics", required=True, help="samples.jsonl written by eval")
    a.add_argument("--out", required=True, help="output directory for the CSV files")

    r = sub.add_parser("reproduce", help="run the benchmark grid and aggregate a table")
    r.add_argument("table", choices=("table1", "table2"))
    r.add_argument("--seeds", type=int, default=3)
    r.add_argument("--datasets", nargs="+", default=["mnist", "fashion", "cifar10"], choices=DATASETS)
    r.add_argument("--models", nargs="+", choices=harness.MODELS,
                   help="restrict the grid (default: all models for table1, rt for table2)")
    r.add_argument("--lr-policy", choices=("per-model", "fixed"), default="per-model",
                   help="per-model: 5e-3 for rt and 5e-4 for baselines; fixed: use --lr for all")
    r.add_argument("--no-reuse", action="store_true", help="retrain even if a finished run exists")
    r.add_argument("--config", help="INI file with a [train] section")
    r.add_argument("--workers", type=int)
    _add_overrides(r)
    return p


def _train_config(args) -> harness.TrainConfig:
    ov = _overrides(args)
    ov.update(seed=getattr(args, "seed", None), model=getattr(args, "model", None),
              workers=args.workers)
    return harness.read_config(args.config, ov)


def cmd_fetch(args) -> int:
    path = fetch(args.dataset, args.dir, log=lambda m: print(m, file=sys.stderr), source=args.source)
    print(path)
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    if args.dump_config:
        print(harness.dump_config(cfg), end="")
        return 0
    ckpt, metrics = harness.train(cfg)
    last = metrics.epochs[-1]
    print(json.dumps({"checkpoint": str(ckpt), "best_epoch": metrics.meta["best_epoch"],
                      "best_val_acc": metrics.meta["best_val_acc"], "test_acc": last["test_acc"],
                      "mean_experts": last["mean_experts"]}))
    return 0


def cmd_eval(args) -> int:
    from .model import load_model

    model, meta = load_model(args.checkpoint)
    cfg = meta.get("train_config")
    if not cfg:
        raise harness.ConfigError(f"{args.checkpoint}: checkpoint carries no training config")
    ds = load_dataset(cfg["dataset"], args.split, root=args.data_dir or cfg.get("data_dir") or None,
                      val_fraction=cfg.get("val_fraction", 0.1), seed=cfg.get("seed", 0),
                      standardize=cfg.get("standardize", False))
    res = harness.evaluate(model, ds, seed=args.seed)
    out = Path(args.out) if args.out else Path(args.checkpoint).with_name(f"samples-{args.split}.jsonl")
    harness.write_samples(out, res.samples, res.header)
    print(json.dumps({"accuracy": res.accuracy, "mean_experts": res.mean_experts,
                      "samples": str(out)}))
    return 0


def cmd_analyze(args) -> int:
    res = report.write_analysis(args.metrics, args.out)
    summary = {"histogram": res["histogram"]}
    if len(res["bitmap"]) > 2:
        summary["usage_accuracy_spearman"] = report.usage_accuracy_correlation(res["bitmap"])
    if res["curves"]:
        summary["prefix_trend"] = report.prefix_trend(res["curves"])
    print(json.dumps(summary))
    return 0


def cmd_reproduce(args) -> int:
    from . import reproduce

    base = _train_config(args)
    rows = reproduce.reproduce(args.table, base, seeds=args.seeds, datasets=args.datasets,
                               models=args.models, lr_policy=args.lr_policy, reuse=not args.no_reuse)
    for row in rows:
        print(",".join(str(v) for v in row.values()))
    return 0


COMMANDS = {"fetch": cmd_fetch, "train": cmd_train, "eval": cmd_eval, "analyze": cmd_analyze,
            "reproduce": cmd_reproduce}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        return COMMANDS[args.command](args)
    except harness.ConfigError as exc:
        print(f"rtmoe: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"rtmoe: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"rtmoe: numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
