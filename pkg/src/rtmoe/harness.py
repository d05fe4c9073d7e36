"""Training and evaluation loops shared by the routed model and the baselines."""
from __future__ import annotations

import configparser
import csv
import dataclasses
import io
import json
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import NumericError
from .data import Dataset, index_batches, load_dataset
from .model import Classifier, ModelConfig, RTModel, build_model, load_model

log = logging.getLogger(__name__)

MODELS = ("rt", "topk", "threshold", "mlp36", "mlp24")
SAMPLES_SCHEMA = "rtmoe.samples/1"
EPOCH_FIELDS = ["epoch", "train_loss", "val_acc", "test_acc", "mean_experts", "clipped_steps"]
# stream ids that keep evaluation noise apart from training noise
_EVAL_STREAM = {"train": 1_000_001, "val": 1_000_002, "test": 1_000_003}


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    dataset: str = "mnist"
    model: str = "rt"
    lr: float = 1e-3
    epochs: int = 30
    batch_size: int = 128
    seed: int = 0
    tau: float = 25.0
    patience: int = 10
    clip_norm: float = 5.0
    workers: int = 1
    train_limit: int = 0
    val_fraction: float = 0.1
    standardize: bool = False
    k: int = 2
    theta: float = 0.5
    layer1_input: str = "f0"
    stop_rule: str = "sample"
    init_scale: str = "sqrt_n"
    data_dir: str = ""
    out_dir: str = "runs"

    def __post_init__(self):
        if self.lr <= 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1 or self.workers < 1:
            raise ConfigError("batch_size and workers must be >= 1")
        if self.model not in MODELS:
            raise ConfigError(f"unknown model {self.model!r}; choose from {', '.join(MODELS)}")

    def model_config(self) -> ModelConfig:
        return ModelConfig.for_dataset(self.dataset, tau=self.tau, layer1_input=self.layer1_input,
                                       stop_rule=self.stop_rule, init_scale=self.init_scale)

    def build_model(self) -> Classifier:
        opts = {}
        if self.model in ("topk", "threshold"):
            opts["baseline"] = {"kind": self.model, "k": self.k, "theta": self.theta}
        return build_model(self.model, self.model_config(), self.seed, **opts)

    def run_dir(self) -> Path:
        return Path(self.out_dir) / f"{self.dataset}-{self.model}-s{self.seed}"


def _coerce(name: str, raw: str, typ):
    try:
        if typ is bool or typ == "bool":
            if raw.lower() not in ("1", "0", "true", "false", "yes", "no"):
                raise ValueError(raw)
            return raw.lower() in ("1", "true", "yes")
        return {"int": int, "float": float, "str": str}.get(typ, typ)(raw)
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r}") from None


def read_config(path=None, overrides: dict | None = None) -> TrainConfig:
    """``[train]`` section of an INI file, then ``overrides`` on top."""
    types = {f.name: f.type for f in dataclasses.fields(TrainConfig)}
    values = {}
    if path:
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise ConfigError(f"cannot read config file {path}")
        if "train" not in cp:
            raise ConfigError(f"{path}: missing [train] section")
        for key, raw in cp["train"].items():
            if key not in types:
                raise ConfigError(f"{path}: unknown key {key!r}")
            values[key] = _coerce(key, raw, types[key])
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in types:
            raise ConfigError(f"unknown setting {key!r}")
        values[key] = val
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc


def dump_config(cfg: TrainConfig | None = None) -> str:
    cp = configparser.ConfigParser()
    cp["train"] = {k: str(v) for k, v in dataclasses.asdict(cfg or TrainConfig()).items()}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()


class Adam:
    def __init__(self, params, lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.b1, self.b2, self.eps = lr, betas[0], betas[1], eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, grads) -> None:
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            p.data = (p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def clip_global_norm(grads, max_norm: float) -> tuple[list, float, bool]:
    norm = float(np.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads)))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        return [g * scale for g in grads], norm, True
    return grads, norm, False


@dataclass
class RunMetrics:
    epochs: list = field(default_factory=list)
    samples: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    model: object = field(default=None, repr=False)

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_epochs_csv(out / "epochs.csv", self.epochs)
        if self.samples:
            write_samples(out / "samples.jsonl", self.samples, self.meta.get("samples_header", {}))
        (out / "run.json").write_text(json.dumps(self.meta, indent=2, sort_keys=True, default=str))


def write_epochs_csv(path, rows) -> None:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=EPOCH_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: r[k] for k in EPOCH_FIELDS})


def read_epochs_csv(path) -> list:
    with open(path) as f:
        return [{k: (int(v) if k in ("epoch", "clipped_steps") else float(v)) for k, v in r.items()}
                for r in csv.DictReader(f)]


def write_samples(path, records, header: dict) -> None:
    with open(path, "w") as f:
        f.write(json.dumps({"schema": SAMPLES_SCHEMA, **header}, sort_keys=True) + "\n")
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def read_samples(path) -> tuple[dict, list]:
    with open(path) as f:
        header = json.loads(f.readline())
        if header.get("schema") != SAMPLES_SCHEMA:
            raise ValueError(f"{path}: unsupported sample schema {header.get('schema')!r}")
        return header, [json.loads(line) for line in f if line.strip()]


def _batch_loss_grads(model: Classifier, x, y, keys, n_total: int):
    params = model.parameters()
    with ad.Tape() as tape:
        res = model.forward_batch(ad.tensor(x), model.noise_for(keys))
        loss = ad.scalar_mul(ad.cross_entropy_logits(res.logits, y, reduction="sum"), 1.0 / n_total)
        grads = tape.grad(loss, params)
    return float(loss.item()), grads, res.experts_used


def compute_grads(model: Classifier, x, y, keys, workers: int = 1, pool=None):
    """Mean-loss gradients for one batch, optionally split over worker threads.

    Each shard records on its own tape; shard gradients are summed in shard
    order, so results do not depend on thread scheduling.
    """
    n = len(y)
    if workers <= 1 or n < 2 * workers:
        return _batch_loss_grads(model, x, y, keys, n)
    shards = np.array_split(np.arange(n), workers)
    jobs = [(x[s], y[s], [keys[i] for i in s]) for s in shards]
    run = lambda j: _batch_loss_grads(model, *j, n)
    outs = list(pool.map(run, jobs)) if pool else [run(j) for j in jobs]
    loss = sum(o[0] for o in outs)
    grads = [sum(gs) for gs in zip(*(o[1] for o in outs))]
    return loss, grads, np.concatenate([o[2] for o in outs])


def _nan_dump(path, x, y, grads, params, epoch, step) -> None:
    dump = {"epoch": epoch, "step": step,
            "batch": {"size": int(len(y)), "x_mean": float(np.mean(x)), "x_std": float(np.std(x)),
                      "labels": np.bincount(y, minlength=10).tolist()},
            "grad_norms": {p.name or str(i): float(np.linalg.norm(g)) for i, (p, g) in
                           enumerate(zip(params, grads))},
            "param_norms": {p.name or str(i): float(np.linalg.norm(p.data)) for i, p in enumerate(params)}}
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_text(json.dumps(dump, indent=2))


def accuracy(model: Classifier, ds: Dataset, seed: int, stream: int, batch_size: int = 256) -> tuple[float, float]:
    """(accuracy, mean experts used) without gradient recording."""
    correct, used = 0, 0.0
    with ad.no_grad():
        for idx in index_batches(len(ds), batch_size):
            keys = [(seed, stream, int(i)) for i in idx]
            res = model.forward_batch(ad.tensor(ds.images[idx]), model.noise_for(keys))
            correct += int((res.logits.data.argmax(axis=1) == ds.labels[idx]).sum())
            used += float(res.experts_used.sum())
    return correct / max(len(ds), 1), used / max(len(ds), 1)


def load_splits(cfg: TrainConfig) -> tuple[Dataset, Dataset, Dataset]:
    kw = dict(root=cfg.data_dir or None, val_fraction=cfg.val_fraction, seed=cfg.seed,
              standardize=cfg.standardize)
    train = load_dataset(cfg.dataset, "train", **kw)
    val = load_dataset(cfg.dataset, "val", **kw)
    test = load_dataset(cfg.dataset, "test", **kw)
    if cfg.train_limit:
        train = train.subset(np.arange(min(cfg.train_limit, len(train))))
    return train, val, test


def train(cfg: TrainConfig, splits=None, out_dir=None, write: bool = True) -> tuple[Path, RunMetrics]:
    """Train ``cfg.model`` and return ``(best checkpoint path, metrics)``.

    The per-epoch CSV is a deterministic function of the config; wall-clock
    times go to ``run.json`` only.
    """
    train_ds, val_ds, test_ds = splits or load_splits(cfg)
    out = Path(out_dir) if out_dir else cfg.run_dir()
    model = cfg.build_model()
    params = model.parameters()
    opt = Adam(params, lr=cfg.lr)
    cfg_dict = dataclasses.asdict(cfg)
    metrics = RunMetrics(meta={"config": cfg_dict, "kind": model.kind,
                               "n_params": model.n_params(), "epoch_seconds": []})
    best_val, best_epoch = -1.0, 0
    pool = ThreadPoolExecutor(cfg.workers) if cfg.workers > 1 else None
    try:
        for epoch in range(cfg.epochs):
            t0 = time.perf_counter()
            losses, clipped = [], 0
            for step, idx in enumerate(index_batches(len(train_ds), cfg.batch_size, cfg.seed, epoch)):
                x, y = train_ds.images[idx], train_ds.labels[idx]
                keys = [(cfg.seed, epoch, int(i)) for i in idx]
                loss, grads, _ = compute_grads(model, x, y, keys, cfg.workers, pool)
                if not np.isfinite(loss) or not all(np.isfinite(g).all() for g in grads):
                    _nan_dump(out / "nan_dump.json", x, y, grads, params, epoch, step)
                    raise NumericError(f"non-finite loss/gradient at epoch {epoch} step {step}; "
                                       f"diagnostics in {out / 'nan_dump.json'}")
                grads, _, was_clipped = clip_global_norm(grads, cfg.clip_norm)
                clipped += was_clipped
                opt.step(grads)
                losses.append(loss)
            val_acc, _ = accuracy(model, val_ds, cfg.seed, _EVAL_STREAM["val"])
            test_acc, mean_experts = accuracy(model, test_ds, cfg.seed, _EVAL_STREAM["test"])
            row = {"epoch": epoch + 1, "train_loss": float(np.mean(losses)), "val_acc": val_acc,
                   "test_acc": test_acc, "mean_experts": mean_experts, "clipped_steps": clipped}
            metrics.epochs.append(row)
            metrics.meta["epoch_seconds"].append(time.perf_counter() - t0)
            log.info("epoch %d loss %.4f val %.4f test %.4f experts %.2f", epoch + 1,
                     row["train_loss"], val_acc, test_acc, mean_experts)
            if write:
                model.save(out / "last.ckpt", {"epoch": epoch + 1, "train_config": cfg_dict})
            if val_acc > best_val:
                best_val, best_epoch = val_acc, epoch + 1
                if write:
                    model.save(out / "best.ckpt", {"epoch": epoch + 1, "val_acc": val_acc,
                                                   "train_config": cfg_dict})
            elif epoch + 1 - best_epoch >= cfg.patience:
                log.info("early stop: no validation gain for %d epochs", cfg.patience)
                break
            if write:
                metrics.write(out)
    finally:
        if pool:
            pool.shutdown()
    metrics.meta.update(best_epoch=best_epoch, best_val_acc=best_val)
    if write:
        metrics.write(out)
    metrics.model = model
    return out / "best.ckpt", metrics


@dataclass
class EvalResult:
    accuracy: float
    mean_experts: float
    samples: list
    header: dict


def evaluate(model_or_path, ds: Dataset, seed: int = 0, batch_size: int = 256,
             prefixes: bool = True) -> EvalResult:
    """Accuracy plus one record per sample (experts used, nodes, prefix correctness)."""
    if isinstance(model_or_path, (str, Path)):
        model, _ = load_model(model_or_path)
    else:
        model = model_or_path
    stream = _EVAL_STREAM.get(ds.split, _EVAL_STREAM["test"])
    c = model.config
    records = []
    with ad.no_grad():
        for idx in index_batches(len(ds), batch_size):
            keys = [(seed, stream, int(i)) for i in idx]
            x = ad.tensor(ds.images[idx])
            res = model.forward_batch(x, model.noise_for(keys))
            pred = res.logits.data.argmax(axis=1)
            prefix = None
            if prefixes and isinstance(model, RTModel):
                h0 = model.features(x).data
                prefix = model.prefix_logits(h0, res.seq)
            for r, i in enumerate(idx):
                label = int(ds.labels[i])
                rec = {"index": int(i), "label": label, "pred": int(pred[r]),
                       "correct": bool(pred[r] == label), "n_experts": int(res.experts_used[r]),
                       "nodes": np.flatnonzero(res.usage[r]).tolist()}
                if res.seq is not None:
                    rec["order"] = res.seq.chosen[r, :res.seq.lengths[r] - 1].tolist()
                if prefix is not None:
                    rec["prefix_correct"] = (prefix[r].argmax(axis=1) == label).tolist()
                records.append(rec)
    acc = float(np.mean([r["correct"] for r in records])) if records else 0.0
    mean_exp = float(np.mean([r["n_experts"] for r in records])) if records else 0.0
    header = {"model": model.kind, "dataset": ds.name, "split": ds.split,
              "n_layers": c.n_layers, "n_experts": c.n_experts, "seed": seed}
    return EvalResult(acc, mean_exp, records, header)
