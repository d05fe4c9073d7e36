"""Run the benchmark grid and aggregate it into the two result tables.

Layout under the results directory::

    <dataset>-<model>-s<seed>/   epochs.csv, run.json, best.ckpt, last.ckpt,
                                 samples.jsonl (test-set records of best.ckpt)
    table1.csv                   dataset,model,accuracy (mean (std) in %)
    table2.csv                   dataset,total_params,avg_params,avg_experts
"""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
from pathlib import Path

import numpy as np

from . import harness
from .data import load_dataset
from .model import load_model

log = logging.getLogger(__name__)

DATASETS = ("mnist", "fashion", "cifar10")
# best learning rates reported for the routed model and for the baselines
MODEL_LR = {"rt": 5e-3, "baseline": 5e-4}


def lr_for(model: str, policy: str, base_lr: float) -> float:
    if policy == "per-model":
        return MODEL_LR["rt" if model == "rt" else "baseline"]
    return base_lr


def run_one(cfg: harness.TrainConfig, reuse: bool = True) -> dict:
    """Train (unless a finished run exists) and evaluate the best checkpoint on test."""
    out = cfg.run_dir()
    samples = out / "samples.jsonl"
    if not (reuse and samples.exists() and (out / "best.ckpt").exists()):
        ckpt, _ = harness.train(cfg)
        test = load_dataset(cfg.dataset, "test", root=cfg.data_dir or None, standardize=cfg.standardize)
        res = harness.evaluate(ckpt, test, seed=cfg.seed)
        harness.write_samples(samples, res.samples, res.header)
    header, records = harness.read_samples(samples)
    model, meta = load_model(out / "best.ckpt")
    acc = float(np.mean([r["correct"] for r in records]))
    experts = float(np.mean([r["n_experts"] for r in records]))
    return {"dataset": cfg.dataset, "model": cfg.model, "seed": cfg.seed, "accuracy": acc,
            "mean_experts": experts, "n_params": model.n_params(),
            "avg_params": model.avg_params(experts), "best_epoch": meta.get("epoch")}


def _fmt(values, scale: float = 100.0) -> str:
    v = np.asarray(values, dtype=float) * scale
    return f"{v.mean():.1f} ({v.std():.1f})"


def run_grid(base: harness.TrainConfig, datasets, models, seeds: int, lr_policy: str = "per-model",
             reuse: bool = True) -> list:
    rows = []
    for ds in datasets:
        for model in models:
            for seed in range(seeds):
                cfg = dataclasses.replace(base, dataset=ds, model=model, seed=seed,
                                          lr=lr_for(model, lr_policy, base.lr))
                log.info("run %s", cfg.run_dir())
                rows.append(run_one(cfg, reuse))
    return rows


def table1(rows) -> list:
    out = []
    keys = sorted({(r["dataset"], r["model"]) for r in rows}, key=lambda k: (DATASETS.index(k[0])
                  if k[0] in DATASETS else 99, harness.MODELS.index(k[1])))
    for ds, model in keys:
        accs = [r["accuracy"] for r in rows if r["dataset"] == ds and r["model"] == model]
        out.append({"dataset": ds, "model": model, "accuracy": _fmt(accs), "n_seeds": len(accs)})
    return out


def table2(rows) -> list:
    out = []
    for ds in dict.fromkeys(r["dataset"] for r in rows):
        rt = [r for r in rows if r["dataset"] == ds and r["model"] == "rt"]
        if not rt:
            continue
        out.append({"dataset": ds, "total_params": rt[0]["n_params"],
                    "avg_params": int(round(np.mean([r["avg_params"] for r in rt]))),
                    "avg_experts": f"{np.mean([r['mean_experts'] for r in rt]):.1f}",
                    "n_seeds": len(rt)})
    return out


def write_table(path, rows) -> None:
    if not rows:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(rows[0]), lineterminator="\n")
        w.writeheader()
        w.writerows(rows)


def reproduce(which: str, base: harness.TrainConfig, seeds: int = 3, datasets=DATASETS,
              models=None, lr_policy: str = "per-model", reuse: bool = True) -> list:
    models = models or (harness.MODELS if which == "table1" else ("rt",))
    rows = run_grid(base, datasets, models, seeds, lr_policy, reuse)
    out = Path(base.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{which}_runs.json").write_text(json.dumps(rows, indent=2, sort_keys=True))
    table = table1(rows) if which == "table1" else table2(rows)
    write_table(out / f"{which}.csv", table)
    return table
