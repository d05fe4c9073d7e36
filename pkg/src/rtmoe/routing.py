"""Routing network: a grid of softmax gates that mirrors the expert grid.

Node ``(l, i)`` receives a firing rate, splits it over the ``N`` nodes of
layer ``l + 1`` plus a skip edge to the output node, and only propagates
when it is active. Last-layer nodes hand their whole rate to the output
node. Nodes are indexed flat as ``l * N + i``.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import kernels
from .autodiff import DimensionError, Tensor

LAYER1_INPUTS = ("f0", "own")


@dataclass
class RoutingParams:
    """Weights of every interior node, stacked as ``(L-1, N, N+1, N)``."""

    weights: Tensor
    n_layers: int
    n_experts: int

    def matrix(self, layer: int, node: int) -> np.ndarray:
        return self.weights.data[layer, node]

    @property
    def n_matrices(self) -> int:
        return self.weights.shape[0] * self.weights.shape[1]


@dataclass
class ActiveMask:
    experts: np.ndarray
    output: bool = False

    @classmethod
    def from_nodes(cls, nodes, n_layers: int, n_experts: int) -> "ActiveMask":
        m = np.zeros(n_layers * n_experts, dtype=bool)
        m[list(nodes)] = True
        return cls(m)

    def __len__(self) -> int:
        return int(self.experts.sum())


@dataclass
class FiringState:
    rates: Tensor
    f_out: Tensor
    probs: np.ndarray = field(repr=False)


def init_routing_weights(n_layers: int, n_experts: int, rng: np.random.Generator,
                         scale: str = "sqrt_n") -> RoutingParams:
    """Normal init with std ``sqrt(N_e + 1)`` so pre-softmax logits start near unit variance.

    ``scale="unit"`` gives plain N(0, 1) weights for ablations.
    """
    if n_layers < 2 or n_experts < 1:
        raise ValueError(f"need L >= 2 and N_e >= 1, got L={n_layers}, N_e={n_experts}")
    n_out = n_experts + 1
    std = np.sqrt(n_out) if scale == "sqrt_n" else 1.0
    w = rng.normal(0.0, std, size=(n_layers - 1, n_experts, n_out, n_experts))
    return RoutingParams(ad.Tensor(w.astype(ad.get_dtype()), requires_grad=True, name="routing"),
                         n_layers, n_experts)


def layer1_inputs(f0: Tensor, convention: str = "f0") -> Tensor:
    """Routing input vector of each layer-1 node, shape ``(B, N, N)``.

    ``"f0"`` feeds every node the whole input rate vector; ``"own"`` feeds
    node ``i`` only its own share ``f0[i]`` at position ``i``.
    """
    n = f0.shape[1]
    if convention == "f0":
        return ad.stack([f0] * n, axis=1)
    if convention == "own":
        eye = np.eye(n, dtype=f0.dtype)
        return ad.custom_op(f0.data[:, :, None] * eye, (f0,),
                            lambda g: (np.einsum("bii->bi", g).copy(),))
    raise ValueError(f"unknown layer-1 routing input {convention!r}; choose from {LAYER1_INPUTS}")


def route(f0: Tensor, x1: Tensor, mask: Tensor, weights: Tensor, backend: str | None = None):
    """Batched routing pass as one differentiable op.

    Returns ``(rates (B, L*N), f_out (B,), probs)``.
    """
    impl = kernels.get(backend)
    B, N = f0.shape
    L = weights.shape[0] + 1
    if weights.shape[1:] != (N, N + 1, N):
        raise DimensionError(f"routing weights {weights.shape} do not match N_e={N}")
    if mask.shape != (B, L * N) or x1.shape != (B, N, N):
        raise DimensionError(f"mask {mask.shape} / layer-1 input {x1.shape} do not match f0 {f0.shape}")
    if (f0.data < 0).any():
        raise ValueError("input firing rates must be non-negative")
    dt = f0.dtype
    c = lambda a: np.ascontiguousarray(a, dtype=dt)
    f0_, x1_, m_, W_ = c(f0.data), c(x1.data), c(mask.data), c(weights.data)
    rates = np.empty((B, L * N), dtype=dt)
    f_out = np.empty(B, dtype=dt)
    probs = np.empty((B, L - 1, N, N + 1), dtype=dt)
    xin = np.empty((B, L - 1, N, N), dtype=dt)
    impl.routing_forward(f0_, x1_, m_, W_, rates, f_out, probs, xin)

    def run_backward(g_rates, g_out):
        g_f0 = np.empty_like(f0_)
        g_x1 = np.empty_like(x1_)
        g_mask = np.empty_like(m_)
        g_W = np.zeros_like(W_)
        impl.routing_backward(c(g_rates), c(g_out), m_, W_, rates, probs, xin,
                              g_f0, g_x1, g_mask, g_W)
        return g_f0, g_x1, g_mask, g_W

    # rates and f_out are packed into one output so a single backward serves both
    packed = ad.custom_op(np.concatenate([rates, f_out[:, None]], axis=1), (f0, x1, mask, weights),
                          lambda g: run_backward(g[:, :-1], g[:, -1]))
    rates_t = ad.slice(packed, (np.s_[:], np.s_[:-1]))
    out_t = ad.reshape(ad.slice(packed, (np.s_[:], np.s_[-1:])), (B,))
    return rates_t, out_t, probs


def routing_forward(f0: Tensor, mask, params: RoutingParams, layer1: str = "f0",
                    backend: str | None = None) -> FiringState:
    """Firing rates for one sample (``f0`` of shape ``(N,)``) or a batch ``(B, N)``."""
    single = f0.ndim == 1
    if single:
        f0 = ad.reshape(f0, (1, -1))
    if isinstance(mask, ActiveMask):
        mask = mask.experts
    if not isinstance(mask, Tensor):
        mask = ad.Tensor(np.asarray(mask, dtype=f0.dtype))
    if single and mask.ndim == 1:
        mask = ad.reshape(mask, (1, -1))
    rates, f_out, probs = route(f0, layer1_inputs(f0, layer1), mask, params.weights, backend)
    if single:
        return FiringState(ad.reshape(rates, (-1,)), ad.reshape(f_out, ()), probs[0])
    return FiringState(rates, f_out, probs)


def routing_forward_composed(f0: Tensor, mask: Tensor, params: RoutingParams,
                             layer1: str = "f0") -> tuple[Tensor, Tensor]:
    """Same map built from generic tape ops only; reference for the fused kernels."""
    B, N = f0.shape
    L = params.n_layers
    W = params.weights
    x1 = layer1_inputs(f0, layer1)
    rates = [f0[:, i] for i in range(N)]
    out = ad.zeros((B,))
    inputs = [x1[:, i, :] for i in range(N)]
    for l in range(L - 1):
        nxt = [ad.zeros((B,)) for _ in range(N)]
        incoming = [[] for _ in range(N)]
        for i in range(N):
            w = ad.reshape(W[l, i], (N + 1, N))
            p = ad.softmax(ad.matmul(inputs[i], _transpose(w)))
            a = ad.mul(rates[l * N + i], mask[:, l * N + i])
            e = ad.scale_rows(p, a)
            for j in range(N):
                nxt[j] = ad.add(nxt[j], e[:, j])
                incoming[j].append(ad.reshape(e[:, j], (B, 1)))
            out = ad.add(out, e[:, N])
        rates.extend(nxt)
        inputs = [ad.concat(incoming[j], axis=1) for j in range(N)]
    for i in range(N):
        idx = (L - 1) * N + i
        out = ad.add(out, ad.mul(rates[idx], mask[:, idx]))
    return ad.stack(rates, axis=1), out


def _transpose(a: Tensor) -> Tensor:
    return ad.custom_op(a.data.T.copy(), (a,), lambda g: (g.T,))
