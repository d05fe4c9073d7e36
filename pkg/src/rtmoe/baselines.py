"""Comparison models: stacked top-k MoE, threshold MoE and plain deep MLPs."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .model import Classifier, ForwardResult, ModelConfig

KINDS = ("topk", "threshold", "mlp36", "mlp24", "mlp")


@dataclass
class BaselineConfig:
    kind: str = "topk"
    k: int = 2
    theta: float = 0.5
    mlp_hidden: int = 36
    mlp_depth: int = 8

    def validate(self, n_experts: int) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown baseline {self.kind!r}; choose from {KINDS}")
        if not 1 <= self.k <= n_experts:
            raise ValueError(f"k must be in [1, {n_experts}], got {self.k}")
        if not 0 < self.theta <= 1:
            raise ValueError(f"theta must be in (0, 1], got {self.theta}")
        if self.mlp_depth < 1 or self.mlp_hidden < 1:
            raise ValueError("MLP depth and width must be positive")


def topk_select(gates: np.ndarray, k: int) -> np.ndarray:
    """Boolean mask of the ``k`` largest gate values per row (ties to the lower index)."""
    order = np.argsort(-gates, axis=-1, kind="stable")[..., :k]
    sel = np.zeros(gates.shape, dtype=bool)
    np.put_along_axis(sel, order, True, axis=-1)
    return sel


def threshold_select(gates: np.ndarray, theta: float, tol: float = 1e-6) -> np.ndarray:
    """Smallest set of strongest gates whose cumulative mass reaches ``theta``."""
    gates = np.atleast_2d(gates)
    order = np.argsort(-gates, axis=-1, kind="stable")
    cum = np.cumsum(np.take_along_axis(gates, order, axis=-1), axis=-1)
    n_take = np.minimum((cum < theta - tol).sum(axis=-1) + 1, gates.shape[-1])
    ranks = np.arange(gates.shape[-1])[None, :] < n_take[:, None]
    sel = np.zeros(gates.shape, dtype=bool)
    np.put_along_axis(sel, order, ranks, axis=-1)
    return sel


def normalize_rows(x: Tensor) -> Tensor:
    """``x / x.sum(axis=1)`` for a non-negative ``(B, n)`` tensor."""
    s = x.data.sum(axis=1, keepdims=True)
    out = x.data / s
    return ad.custom_op(out, (x,), lambda g: ((g - (g * out).sum(axis=1, keepdims=True)) / s,))


class GatedMoE(Classifier):
    """Stacked MoE with one softmax gate per layer, experts mixed by renormalised gate weights."""

    def __init__(self, config: ModelConfig, seed: int = 0, baseline: BaselineConfig | None = None):
        super().__init__(config, seed)
        self.baseline = baseline or BaselineConfig(kind=self.kind)
        self.baseline.validate(config.n_experts)
        rng = np.random.default_rng(seed)
        c = config
        nn.init_input_block(self.params, c.input_kind, c.input_shape, c.width, rng)
        for l in range(c.n_layers):
            nn.init_linear(self.params, f"gate.{l}", c.width, c.n_experts, rng, bias=False)
            for i in range(c.n_experts):
                nn.init_expert(self.params, f"expert.{l}.{i}", c.width, c.expert_hidden, rng)
        nn.init_linear(self.params, "output", c.width, c.n_classes, rng)

    def select(self, gates: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def expert_params(self) -> int:
        return nn.count(self.params, "expert.0.0.")

    def extra_config(self) -> dict:
        return {"baseline": vars(self.baseline).copy()}

    def forward_batch(self, x: Tensor, noise=None) -> ForwardResult:
        c = self.config
        n_lin = len(c.expert_hidden) + 1
        h = self.features(x)
        usage = np.zeros((x.shape[0], c.n_nodes), dtype=bool)
        for l in range(c.n_layers):
            g = ad.softmax(nn.linear(self.params, f"gate.{l}", h))
            sel = self.select(g.data)
            usage[:, l * c.n_experts:(l + 1) * c.n_experts] = sel
            w = normalize_rows(ad.mul(g, ad.Tensor(sel.astype(g.dtype))))
            out = None
            for i in np.flatnonzero(sel.any(axis=0)):
                e = nn.expert(self.params, f"expert.{l}.{i}", h, n_lin)
                term = ad.scale_rows(e, w[:, int(i)])
                out = term if out is None else ad.add(out, term)
            h = out
        return ForwardResult(self.head(h), usage.sum(axis=1), usage)


class TopKMoE(GatedMoE):
    kind = "topk"

    def select(self, gates):
        return topk_select(gates, self.baseline.k)


class ThresholdMoE(GatedMoE):
    kind = "threshold"

    def select(self, gates):
        return threshold_select(gates, self.baseline.theta)


class MLP(Classifier):
    """Plain ReLU MLP with ``mlp_depth`` hidden layers of ``mlp_hidden`` units."""

    kind = "mlp"

    def __init__(self, config: ModelConfig, seed: int = 0, baseline: BaselineConfig | None = None):
        super().__init__(config, seed)
        self.baseline = baseline or BaselineConfig(kind="mlp")
        self.baseline.validate(config.n_experts)
        rng = np.random.default_rng(seed)
        c, b = config, self.baseline
        # the input block doubles as the first hidden layer
        nn.init_input_block(self.params, c.input_kind, c.input_shape, b.mlp_hidden, rng)
        for n in range(b.mlp_depth - 1):
            nn.init_linear(self.params, f"hidden.{n}", b.mlp_hidden, b.mlp_hidden, rng)
        nn.init_linear(self.params, "output", b.mlp_hidden, c.n_classes, rng)

    def extra_config(self) -> dict:
        return {"baseline": vars(self.baseline).copy()}

    def forward_batch(self, x: Tensor, noise=None) -> ForwardResult:
        h = ad.relu(self.features(x))
        for n in range(self.baseline.mlp_depth - 1):
            h = ad.relu(nn.linear(self.params, f"hidden.{n}", h))
        B = x.shape[0]
        return ForwardResult(self.head(h), np.zeros(B, dtype=np.int64),
                             np.zeros((B, self.config.n_nodes), dtype=bool))


def build(kind: str, config: ModelConfig, seed: int = 0, baseline: dict | BaselineConfig | None = None,
          **_ignored) -> Classifier:
    if isinstance(baseline, dict):
        baseline = BaselineConfig(**baseline)
    if kind in ("mlp36", "mlp24"):
        baseline = baseline or BaselineConfig(kind="mlp", mlp_hidden=int(kind[3:]))
        return MLP(config, seed, baseline)
    if kind == "mlp":
        return MLP(config, seed, baseline)
    if kind == "topk":
        return TopKMoE(config, seed, baseline or BaselineConfig(kind="topk"))
    if kind == "threshold":
        return ThresholdMoE(config, seed, baseline or BaselineConfig(kind="threshold"))
    raise ValueError(f"unknown model {kind!r}; choose from rt, {', '.join(KINDS)}")
