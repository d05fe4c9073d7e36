"""Layers shared by the routed model and the baselines."""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import DimensionError, Tensor

INPUT_KINDS = ("dense", "conv")
CONV_CHANNELS = (4, 8, 16)


def init_linear(params: dict, name: str, fan_in: int, fan_out: int, rng, bias: bool = True) -> None:
    bound = 1.0 / np.sqrt(fan_in)
    dt = ad.get_dtype()
    params[f"{name}.w"] = ad.Tensor(rng.uniform(-bound, bound, (fan_in, fan_out)).astype(dt),
                                    requires_grad=True, name=f"{name}.w")
    if bias:
        params[f"{name}.b"] = ad.Tensor(rng.uniform(-bound, bound, fan_out).astype(dt),
                                        requires_grad=True, name=f"{name}.b")


def linear(params: dict, name: str, h: Tensor) -> Tensor:
    out = ad.matmul(h, params[f"{name}.w"])
    b = params.get(f"{name}.b")
    return out if b is None else ad.add(out, b)


def init_input_block(params: dict, kind: str, input_shape, width: int, rng) -> None:
    """Dense ``prod(input_shape) -> width`` or a three-stage conv/pool stack then dense."""
    if kind == "dense":
        init_linear(params, "input", int(np.prod(input_shape)), width, rng)
    elif kind == "conv":
        c, h, w = input_shape
        dt = ad.get_dtype()
        for n, c_out in enumerate(CONV_CHANNELS):
            bound = 1.0 / np.sqrt(c * 9)
            params[f"conv{n}.w"] = ad.Tensor(rng.uniform(-bound, bound, (c_out, c, 3, 3)).astype(dt),
                                             requires_grad=True, name=f"conv{n}.w")
            params[f"conv{n}.b"] = ad.Tensor(rng.uniform(-bound, bound, c_out).astype(dt),
                                             requires_grad=True, name=f"conv{n}.b")
            c, h, w = c_out, h // 2, w // 2
        init_linear(params, "input", c * h * w, width, rng)
    else:
        raise ValueError(f"unknown input block {kind!r}; choose from {INPUT_KINDS}")


def input_block(params: dict, kind: str, x: Tensor) -> Tensor:
    B = x.shape[0]
    if kind == "dense":
        return linear(params, "input", ad.reshape(x, (B, -1)))
    if x.ndim != 4:
        raise DimensionError(f"conv input block expects (B, C, H, W), got {x.shape}")
    h = x
    for n in range(len(CONV_CHANNELS)):
        h = ad.relu(ad.conv2d(h, params[f"conv{n}.w"], params[f"conv{n}.b"], padding=1))
        h = ad.pool2d(h, 2)
    return linear(params, "input", ad.reshape(h, (B, -1)))


def init_expert(params: dict, name: str, width: int, hidden, rng) -> None:
    sizes = [width, *hidden, width]
    for n in range(len(sizes) - 1):
        init_linear(params, f"{name}.{n}", sizes[n], sizes[n + 1], rng)


def expert(params: dict, name: str, h: Tensor, n_linear: int) -> Tensor:
    """ReLU MLP; the final projection back to the model width is linear."""
    for n in range(n_linear):
        h = linear(params, f"{name}.{n}", h)
        if n < n_linear - 1:
            h = ad.relu(h)
    return h


def count(params: dict, prefix: str | None = None) -> int:
    return int(sum(t.data.size for k, t in params.items() if prefix is None or k.startswith(prefix)))
