"""The routed classifier: input block, expert grid, routing network, output layer."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import checkpoint, nn
from .autodiff import DimensionError, Tensor
from .routing import LAYER1_INPUTS, RoutingParams, init_routing_weights
from .sequencer import (STOP_RULES, ActivationSequence, SequenceBatch, build_sequences,
                        sample_noise)

DATASET_SHAPES = {"mnist": (1, 28, 28), "fashion": (1, 28, 28), "digits": (1, 28, 28),
                  "cifar10": (3, 32, 32)}


@dataclass
class ModelConfig:
    n_layers: int = 4
    n_experts: int = 8
    width: int = 16
    expert_hidden: tuple = (16, 16)
    input_kind: str = "dense"
    input_shape: tuple = (1, 28, 28)
    n_classes: int = 10
    tau: float = 25.0
    init_scale: str = "sqrt_n"
    layer1_input: str = "f0"
    stop_rule: str = "sample"

    def __post_init__(self):
        self.expert_hidden = tuple(self.expert_hidden)
        self.input_shape = tuple(self.input_shape)
        if self.n_layers < 2 or self.n_experts < 1:
            raise ValueError(f"need n_layers >= 2 and n_experts >= 1, got {self.n_layers}, {self.n_experts}")
        if self.input_kind not in nn.INPUT_KINDS:
            raise ValueError(f"unknown input_kind {self.input_kind!r}")
        if self.input_kind == "conv" and len(self.input_shape) != 3:
            raise ValueError("conv input block needs a (C, H, W) input_shape")
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if self.layer1_input not in LAYER1_INPUTS:
            raise ValueError(f"unknown layer1_input {self.layer1_input!r}")
        if self.stop_rule not in STOP_RULES:
            raise ValueError(f"unknown stop_rule {self.stop_rule!r}")
        if self.init_scale not in ("sqrt_n", "unit"):
            raise ValueError(f"unknown init_scale {self.init_scale!r}")

    @classmethod
    def for_dataset(cls, name: str, **overrides) -> "ModelConfig":
        shape = DATASET_SHAPES[name]
        kind = "conv" if name == "cifar10" else "dense"
        return cls(input_kind=kind, input_shape=shape, **overrides)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["expert_hidden"] = list(self.expert_hidden)
        d["input_shape"] = list(self.input_shape)
        return d

    @property
    def n_nodes(self) -> int:
        return self.n_layers * self.n_experts


@dataclass
class ForwardResult:
    logits: Tensor
    experts_used: np.ndarray           # (B,)
    usage: np.ndarray                  # (B, L*N_e) bool
    seq: SequenceBatch | None = field(default=None, repr=False)


class Classifier:
    """Shared plumbing: parameter dict, input block, output layer, checkpoints."""

    kind = "base"
    uses_noise = False

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        self.seed = seed
        self.params: dict[str, Tensor] = {}

    def parameters(self) -> list:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def n_params(self) -> int:
        return nn.count(self.params)

    def expert_params(self) -> int:
        """Parameters of one expert (0 for models without experts)."""
        return 0

    def avg_params(self, mean_experts: float) -> float:
        """Parameters touched per sample when ``mean_experts`` experts run on average."""
        n_all = self.config.n_nodes if self.expert_params() else 0
        return self.n_params() - n_all * self.expert_params() + mean_experts * self.expert_params()

    def features(self, x: Tensor) -> Tensor:
        want = self.config.input_shape
        if tuple(x.shape[1:]) != want and int(np.prod(x.shape[1:])) != int(np.prod(want)):
            raise DimensionError(f"input shape {x.shape[1:]} does not match configured {want}")
        if self.config.input_kind == "conv" and x.ndim != 4:
            x = ad.reshape(x, (x.shape[0], *want))
        return nn.input_block(self.params, self.config.input_kind, x)

    def head(self, h: Tensor) -> Tensor:
        return nn.linear(self.params, "output", h)

    def noise_for(self, keys) -> np.ndarray | None:
        return None

    def forward_batch(self, x: Tensor, noise=None) -> ForwardResult:
        raise NotImplementedError

    def extra_config(self) -> dict:
        return {}

    def save(self, path, meta: dict | None = None) -> None:
        cfg = {"model": self.config.to_dict(), "seed": self.seed, **self.extra_config()}
        checkpoint.save(path, self.kind, cfg, self.params, meta)

    def load_arrays(self, arrays: dict) -> None:
        missing = set(self.params) ^ set(arrays)
        if missing:
            raise checkpoint.CheckpointError(f"parameter names differ: {sorted(missing)}")
        for k, arr in arrays.items():
            if arr.shape != self.params[k].shape:
                raise checkpoint.CheckpointError(f"{k}: shape {arr.shape} != {self.params[k].shape}")
            self.params[k].data = arr.astype(self.params[k].dtype)


class RTModel(Classifier):
    """Routed expert grid; each sample runs the expert set its activation sequence selects."""

    kind = "rt"
    uses_noise = True

    def __init__(self, config: ModelConfig, seed: int = 0):
        super().__init__(config, seed)
        rng = np.random.default_rng(seed)
        c = config
        nn.init_input_block(self.params, c.input_kind, c.input_shape, c.width, rng)
        nn.init_linear(self.params, "gate", c.width, c.n_experts, rng)
        for l in range(c.n_layers):
            for i in range(c.n_experts):
                nn.init_expert(self.params, f"expert.{l}.{i}", c.width, c.expert_hidden, rng)
        self.params["routing"] = init_routing_weights(c.n_layers, c.n_experts, rng, c.init_scale).weights
        nn.init_linear(self.params, "output", c.width, c.n_classes, rng)

    @property
    def routing(self) -> RoutingParams:
        return RoutingParams(self.params["routing"], self.config.n_layers, self.config.n_experts)

    def expert_params(self) -> int:
        return nn.count(self.params, "expert.0.0.")

    def noise_for(self, keys) -> np.ndarray:
        s = self.config.n_nodes + 1
        return sample_noise(keys, s, s)

    def gate_f0(self, h0: Tensor) -> Tensor:
        """Input firing rates: softmax of an affine map of the input-block features."""
        return ad.softmax(nn.linear(self.params, "gate", h0))

    def expert_layer(self, l: int, h: Tensor, mask: Tensor) -> Tensor:
        """Sum of the layer's expert outputs weighted by their mask entries.

        Rows with no active expert in this layer pass ``h`` through.
        """
        c = self.config
        n_lin = len(c.expert_hidden) + 1
        cols = slice(l * c.n_experts, (l + 1) * c.n_experts)
        out = None
        for i in range(c.n_experts):
            e = nn.expert(self.params, f"expert.{l}.{i}", h, n_lin)
            term = ad.scale_rows(e, mask[:, l * c.n_experts + i])
            out = term if out is None else ad.add(out, term)
        idle = (mask.data[:, cols].sum(axis=1) == 0).astype(h.dtype)
        return ad.add(out, ad.scale_rows(h, ad.Tensor(idle)))

    def expert_stage(self, h0: Tensor, mask: Tensor) -> Tensor:
        h = h0
        for l in range(self.config.n_layers):
            h = self.expert_layer(l, h, mask)
        return self.head(h)

    def forward_batch(self, x: Tensor, noise=None, backend: str | None = None) -> ForwardResult:
        if noise is None:
            raise ValueError("the routed model needs Gumbel noise; see noise_for()")
        c = self.config
        h0 = self.features(x)
        f0 = self.gate_f0(h0)
        seq = build_sequences(f0, self.routing, c.tau, noise, layer1=c.layer1_input,
                              stop_rule=c.stop_rule, backend=backend)
        logits = self.expert_stage(h0, seq.final_mask)
        usage = seq.final_mask.data > 0.5
        return ForwardResult(logits, usage.sum(axis=1), usage, seq)

    def forward(self, x, rng: np.random.Generator) -> tuple[Tensor, ActivationSequence]:
        """One sample in, ``(logits (C,), activation sequence)`` out."""
        x = x if isinstance(x, Tensor) else ad.tensor(x)
        x = ad.reshape(x, (1, *x.shape))
        s = self.config.n_nodes + 1
        noise = ad.gumbel_noise(rng, (1, s, s), x.dtype)
        res = self.forward_batch(x, noise)
        return ad.reshape(res.logits, (-1,)), res.seq.sequence(0)

    def predict_at_prefixes(self, x, seq: ActivationSequence) -> list:
        """``[(k, logits)]`` for the first k experts of ``seq``, k = 1..|final set|."""
        x = x if isinstance(x, Tensor) else ad.tensor(x)
        with ad.no_grad():
            h0 = self.features(ad.reshape(x, (1, *x.shape)))
            masks = np.stack([s.mask[:self.config.n_nodes] for s in seq.steps[:-1]]).astype(h0.dtype)
            k = len(masks)
            logits = self.expert_stage(ad.Tensor(np.repeat(h0.data, k, axis=0)), ad.Tensor(masks))
        return [(n + 1, logits.data[n]) for n in range(k)]

    def prefix_logits(self, h0: np.ndarray, seq: SequenceBatch) -> list:
        """Batched prefix evaluation: one ``(k_b, C)`` array per sample."""
        M = self.config.n_nodes
        rows, masks = [], []
        for b in range(len(seq)):
            m = np.zeros(M, dtype=h0.dtype)
            for t in range(seq.lengths[b] - 1):
                m = m.copy()
                m[seq.chosen[b, t]] = 1
                rows.append(b)
                masks.append(m)
        with ad.no_grad():
            logits = self.expert_stage(ad.Tensor(h0[rows]), ad.Tensor(np.stack(masks))).data
        out, start = [], 0
        for b in range(len(seq)):
            k = seq.lengths[b] - 1
            out.append(logits[start:start + k])
            start += k
        return out


def build_model(kind: str, config: ModelConfig, seed: int = 0, **baseline_options) -> Classifier:
    if kind == "rt":
        return RTModel(config, seed)
    from . import baselines
    return baselines.build(kind, config, seed, **baseline_options)


def load_model(path) -> tuple[Classifier, dict]:
    kind, cfg, arrays, meta = checkpoint.load(path)
    config = ModelConfig(**cfg["model"])
    extra = {k: v for k, v in cfg.items() if k not in ("model", "seed")}
    model = build_model(kind, config, cfg.get("seed", 0), **extra)
    model.load_arrays(arrays)
    return model, meta
