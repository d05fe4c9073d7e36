"""Plot-ready exports computed from per-sample evaluation records.

Every function here takes the records of a ``samples.jsonl`` file (see
``harness.write_samples``) and never needs the model.

CSV outputs:

    histogram.csv      n_experts,count
    class_usage.csv    class,layer,expert,frequency
    class_summary.csv  class,count,mean_experts,accuracy
    prefix_curves.csv  final_length,count,k,accuracy
"""
from __future__ import annotations

import csv
from collections import Counter, defaultdict
from pathlib import Path

import numpy as np
from scipy.stats import spearmanr

from .harness import read_samples


def expert_histogram(samples) -> dict:
    """``{experts used: number of samples}``, sorted by experts used."""
    return dict(sorted(Counter(int(s["n_experts"]) for s in samples).items()))


def class_usage_bitmap(samples, n_layers: int, n_experts: int) -> dict:
    """Per class: node activation frequencies ``(L, N_e)``, mean experts, accuracy."""
    groups = defaultdict(list)
    for s in samples:
        groups[int(s["label"])].append(s)
    out = {}
    for label in sorted(groups):
        rows = groups[label]
        freq = np.zeros(n_layers * n_experts)
        for s in rows:
            freq[s["nodes"]] += 1
        out[label] = {"count": len(rows),
                      "frequency": (freq / len(rows)).reshape(n_layers, n_experts),
                      "mean_experts": float(np.mean([s["n_experts"] for s in rows])),
                      "accuracy": float(np.mean([s["correct"] for s in rows]))}
    return out


def prefix_accuracy_curves(samples) -> dict:
    """``{final length: {"count": n, "accuracy": [acc at k=1..final length]}}``."""
    groups = defaultdict(list)
    for s in samples:
        if s.get("prefix_correct"):
            groups[len(s["prefix_correct"])].append(s["prefix_correct"])
    return {n: {"count": len(rows), "accuracy": np.mean(np.array(rows, dtype=float), axis=0).tolist()}
            for n, rows in sorted(groups.items())}


def usage_accuracy_correlation(bitmap: dict) -> float:
    """Spearman correlation between per-class mean experts and per-class accuracy."""
    classes = sorted(bitmap)
    rho = spearmanr([bitmap[c]["mean_experts"] for c in classes],
                    [bitmap[c]["accuracy"] for c in classes])[0]
    return float(rho)


def prefix_trend(curves: dict, min_count: int = 20) -> float:
    """Sample-weighted mean step ``acc[k+1] - acc[k]`` over groups with ``min_count`` samples."""
    num = den = 0.0
    for group in curves.values():
        acc = group["accuracy"]
        if group["count"] < min_count or len(acc) < 2:
            continue
        num += group["count"] * float(np.mean(np.diff(acc)))
        den += group["count"]
    return num / den if den else float("nan")


def final_accuracy_by_length(curves: dict) -> dict:
    return {n: g["accuracy"][-1] for n, g in curves.items()}


def epochs_to_reach(curve, target: float):
    """First 1-based epoch whose value reaches ``target``, or None."""
    for n, v in enumerate(curve, 1):
        if v >= target:
            return n
    return None


def write_analysis(samples_path, out_dir) -> dict:
    header, samples = read_samples(samples_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    hist = expert_histogram(samples)
    _write_csv(out / "histogram.csv", ["n_experts", "count"], hist.items())
    bitmap = class_usage_bitmap(samples, header["n_layers"], header["n_experts"])
    _write_csv(out / "class_usage.csv", ["class", "layer", "expert", "frequency"],
               ((c, l, i, f"{v['frequency'][l, i]:.6f}") for c, v in bitmap.items()
                for l in range(header["n_layers"]) for i in range(header["n_experts"])))
    _write_csv(out / "class_summary.csv", ["class", "count", "mean_experts", "accuracy"],
               ((c, v["count"], f"{v['mean_experts']:.6f}", f"{v['accuracy']:.6f}")
                for c, v in bitmap.items()))
    curves = prefix_accuracy_curves(samples)
    _write_csv(out / "prefix_curves.csv", ["final_length", "count", "k", "accuracy"],
               ((n, g["count"], k + 1, f"{a:.6f}") for n, g in curves.items()
                for k, a in enumerate(g["accuracy"])))
    return {"histogram": hist, "bitmap": bitmap, "curves": curves}


def _write_csv(path, fields, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(fields)
        w.writerows(rows)
