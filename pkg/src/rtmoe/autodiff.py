"""Minimal tape-based reverse-mode differentiation over numpy arrays.

Every op evaluates eagerly and, when gradients are enabled and one of its
inputs requires them, appends a record to the active :class:`Tape`.
``Tensor.backward`` replays that tape in reverse order.

Shapes are explicit: the only implicit broadcast is a 1-D bias added to the
last axis. Row scaling (``scale_rows``) covers the per-sample mask products.
"""
from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "DimensionError", "NumericError", "NoCandidateError",
    "Tensor", "Tape", "tensor", "zeros", "no_grad", "precision", "get_dtype",
    "custom_op", "add", "sub", "mul", "scalar_mul", "scale_rows", "matmul",
    "sum", "relu", "exp", "log", "log_rates", "softmax", "cross_entropy_logits",
    "conv2d", "pool2d", "concat", "stack", "reshape", "slice", "gumbel_noise",
    "gumbel_softmax_ste",
]


class DimensionError(ValueError):
    pass


class NumericError(ArithmeticError):
    pass


class NoCandidateError(ValueError):
    pass


_DTYPE = [np.float32]
_local = threading.local()


def get_dtype():
    return _DTYPE[-1]


@contextlib.contextmanager
def precision(dtype):
    """Switch the default float type, e.g. to float64 for gradient checks."""
    _DTYPE.append(np.dtype(dtype).type)
    try:
        yield
    finally:
        _DTYPE.pop()


def _tapes() -> list:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = _local.tapes = [Tape()]
    return stack


def _grad_enabled() -> bool:
    return getattr(_local, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    prev = _grad_enabled()
    _local.grad_enabled = False
    try:
        yield
    finally:
        _local.grad_enabled = prev


@dataclass
class _Record:
    out: "Tensor"
    inputs: tuple
    backward: Callable


class Tape:
    """Ordered list of executed ops; one tape per thread of work.

    Used as a context manager, a tape becomes the recording target for every
    op run inside the block on the current thread.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tapes().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _tapes().pop()

    def __len__(self) -> int:
        return len(self.records)

    def clear(self) -> None:
        self.records.clear()

    def backward(self, root: "Tensor", grad=None) -> None:
        """Accumulate d(root)/d(t) into ``t.grad`` for every tensor reached."""
        for t, g in self._propagate(root, grad).values():
            g = g.astype(t.data.dtype, copy=False)
            t.grad = g.copy() if t.grad is None else t.grad + g

    def grad(self, root: "Tensor", wrt: Sequence["Tensor"]) -> list:
        """Gradients of ``root`` w.r.t. ``wrt`` without touching any ``.grad``."""
        found = self._propagate(root, None)
        return [found[id(t)][1].astype(t.dtype, copy=False) if id(t) in found
                else np.zeros_like(t.data) for t in wrt]

    def _propagate(self, root: "Tensor", grad) -> dict:
        if root._tape is not self:
            raise ValueError("tensor was not recorded on this tape")
        if grad is None:
            if root.data.size != 1:
                raise DimensionError(f"backward needs a scalar, got shape {root.shape}")
            grad = np.ones_like(root.data)
        grads = {id(root): (root, np.asarray(grad, dtype=root.data.dtype))}
        for rec in reversed(self.records[: root._index + 1]):
            entry = grads.get(id(rec.out))
            if entry is None:
                continue
            in_grads = rec.backward(entry[1])
            for inp, g in zip(rec.inputs, in_grads):
                if g is None or not inp.requires_grad:
                    continue
                prev = grads.get(id(inp))
                grads[id(inp)] = (inp, g if prev is None else prev[1] + g)
        return grads


def _tape() -> Tape:
    return _tapes()[-1]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_tape", "_index", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(get_dtype())
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = None
        self._tape = None
        self._index = -1
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self) -> int:
        return len(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad=None) -> None:
        if self._tape is None:
            raise ValueError("tensor has no recorded history")
        self._tape.backward(self, grad)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    __add__ = lambda self, o: add(self, o)
    __sub__ = lambda self, o: sub(self, o)
    __matmul__ = lambda self, o: matmul(self, o)
    __neg__ = lambda self: scalar_mul(self, -1.0)
    __getitem__ = lambda self, idx: slice(self, idx)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_mul(self, other)

    __rmul__ = __mul__


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=get_dtype()), requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=get_dtype()), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=get_dtype()))


def custom_op(out_data, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out_data`` as the result of a differentiable op.

    ``backward(g)`` must return one gradient (or ``None``) per input.
    """
    out = Tensor(out_data)
    if _grad_enabled() and any(t.requires_grad for t in inputs):
        tape = _tape()
        out.requires_grad = True
        out._tape = tape
        out._index = len(tape.records)
        tape.records.append(_Record(out, tuple(inputs), backward))
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape == b.shape:
        return custom_op(a.data + b.data, (a, b), lambda g: (g, g))
    if b.ndim == 1 and a.ndim >= 1 and a.shape[-1] == b.shape[0]:
        axes = tuple(range(a.ndim - 1))
        return custom_op(a.data + b.data, (a, b), lambda g: (g, g.sum(axis=axes)))
    raise DimensionError(f"add: shapes {a.shape} and {b.shape} are incompatible")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "sub")
    return custom_op(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_same(a, b, "mul")
    return custom_op(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def scalar_mul(a: Tensor, c: float) -> Tensor:
    return custom_op(a.data * c, (a,), lambda g: (g * c,))


def scale_rows(a: Tensor, s: Tensor) -> Tensor:
    """Multiply row ``b`` of ``a`` by ``s[b]``; ``s`` has shape ``(a.shape[0],)``."""
    a, s = _as_tensor(a), _as_tensor(s)
    if s.ndim != 1 or a.ndim < 1 or a.shape[0] != s.shape[0]:
        raise DimensionError(f"scale_rows: shapes {a.shape} and {s.shape} are incompatible")
    col = s.data.reshape((-1,) + (1,) * (a.ndim - 1))
    red = tuple(range(1, a.ndim))

    def back(g):
        return g * col, (g * a.data).sum(axis=red) if red else g * a.data

    return custom_op(a.data * col, (a, s), back)


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} are incompatible")
    return custom_op(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def sum(a: Tensor, axis=None) -> Tensor:
    out = a.data.sum(axis=axis)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), a.shape).copy(),)

    return custom_op(np.asarray(out), (a,), back)


def relu(a: Tensor) -> Tensor:
    keep = a.data > 0
    return custom_op(np.where(keep, a.data, 0).astype(a.dtype), (a,), lambda g: (g * keep,))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return custom_op(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return custom_op(np.log(a.data), (a,), lambda g: (g / a.data,))


def log_rates(p: Tensor, eps: float = 1e-20) -> Tensor:
    """``log(p + eps)`` for positive rates, ``-inf`` where ``p == 0``.

    Exactly-zero rates mark impossible candidates: they get no probability
    and no gradient.
    """
    pos = p.data > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.where(pos, np.log(p.data + eps), -np.inf).astype(p.dtype)
    return custom_op(out, (p,), lambda g: (np.where(pos, g / (p.data + eps), 0).astype(p.dtype),))


def _softmax_np(z: np.ndarray, axis: int = -1) -> np.ndarray:
    m = np.max(z, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0)
    e = np.exp(z - m)
    return e / e.sum(axis=axis, keepdims=True)


def _softmax_back(y: np.ndarray, g: np.ndarray, axis: int = -1) -> np.ndarray:
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def softmax(z: Tensor, axis: int = -1) -> Tensor:
    if np.isnan(z.data).any():
        raise NumericError("softmax: NaN in input")
    y = _softmax_np(z.data, axis)
    return custom_op(y, (z,), lambda g: (_softmax_back(y, g, axis),))


def cross_entropy_logits(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy of ``(B, C)`` logits against integer labels."""
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy_logits: logits {logits.shape}, labels {labels.shape}")
    z = logits.data
    m = z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z - m).sum(axis=1, keepdims=True)) + m
    rows = np.arange(len(labels))
    losses = lse[:, 0] - z[rows, labels]
    scale = 1.0 / len(labels) if reduction == "mean" else 1.0
    out = np.asarray(losses.sum() * scale, dtype=z.dtype)

    def back(g):
        d = np.exp(z - lse)
        d[rows, labels] -= 1
        return (d * (g * scale),)

    return custom_op(out, (logits,), back)


def conv2d(x: Tensor, w: Tensor, b: Tensor | None = None, padding: int = 0) -> Tensor:
    """Stride-1 cross-correlation, NCHW input, ``(O, C, kh, kw)`` weights."""
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} and weight {w.shape} are incompatible")
    p = padding
    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    kh, kw = w.shape[2:]
    cols = sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B, C, Ho, Wo, kh, kw
    out = np.einsum("bchwij,ocij->bohw", cols, w.data, optimize=True)
    inputs = (x, w) if b is None else (x, w, b)
    if b is not None:
        out = out + b.data[None, :, None, None]

    def back(g):
        gw = np.einsum("bohw,bchwij->ocij", g, cols, optimize=True)
        # full correlation of g with the flipped kernel
        gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
        gcols = sliding_window_view(gp, (kh, kw), axis=(2, 3))
        gxp = np.einsum("bohwij,ocij->bchw", gcols, w.data[:, :, ::-1, ::-1], optimize=True)
        gx = gxp[:, :, p:gxp.shape[2] - p, p:gxp.shape[3] - p] if p else gxp
        grads = [gx, gw]
        if b is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return custom_op(out.astype(x.dtype, copy=False), inputs, back)


def pool2d(x: Tensor, size: int = 2) -> Tensor:
    """Non-overlapping max pooling; trailing rows/cols that do not fill a window are dropped."""
    B, C, H, W = x.shape
    Ho, Wo = H // size, W // size
    win = x.data[:, :, :Ho * size, :Wo * size].reshape(B, C, Ho, size, Wo, size)
    win = win.transpose(0, 1, 2, 4, 3, 5).reshape(B, C, Ho, Wo, size * size)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]

    def back(g):
        gw = np.zeros_like(win)
        np.put_along_axis(gw, arg[..., None], g[..., None], axis=-1)
        gw = gw.reshape(B, C, Ho, Wo, size, size).transpose(0, 1, 2, 4, 3, 5)
        gx = np.zeros_like(x.data)
        gx[:, :, :Ho * size, :Wo * size] = gw.reshape(B, C, Ho * size, Wo * size)
        return (gx,)

    return custom_op(out, (x,), back)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return custom_op(out, tensors, lambda g: tuple(np.split(g, bounds, axis=axis)))


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    out = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)
    return custom_op(out, tensors,
                     lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def reshape(a: Tensor, shape) -> Tensor:
    return custom_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def slice(a: Tensor, index) -> Tensor:
    """Basic (non-fancy) indexing, e.g. ``a[:, 2:5]``."""
    out = a.data[index]

    def back(g):
        full = np.zeros_like(a.data)
        full[index] += g
        return (full,)

    return custom_op(np.array(out), (a,), back)


def gumbel_noise(rng: np.random.Generator, shape, dtype=None) -> np.ndarray:
    u = np.clip(rng.random(shape), 1e-12, 1 - 1e-7)
    return (-np.log(-np.log(u))).astype(dtype or get_dtype())


def gumbel_softmax_ste(logits: Tensor, tau: float, rng: np.random.Generator | None = None,
                       noise: np.ndarray | None = None, force=None) -> Tensor:
    """Hard one-hot sample in the forward pass, Gumbel-softmax gradient backward.

    Works on a single ``(n,)`` vector or row-wise on ``(B, n)``. ``noise``
    overrides drawing from ``rng``; ``force`` (row-wise indices, -1 for none)
    replaces the sampled index while keeping the soft gradient.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    z = logits.data
    if np.isnan(z).any():
        raise NumericError("gumbel_softmax_ste: NaN logits")
    if not np.isfinite(z).any(axis=-1).all():
        raise NoCandidateError("gumbel_softmax_ste: every logit is -inf")
    if noise is None:
        if rng is None:
            raise ValueError("pass rng or noise")
        noise = gumbel_noise(rng, z.shape, z.dtype)
    perturbed = z + noise
    idx = perturbed.argmax(axis=-1)
    if force is not None:
        force = np.asarray(force)
        idx = np.where(force >= 0, force, idx)
    hard = np.zeros_like(z)
    np.put_along_axis(hard, np.expand_dims(idx, -1), 1.0, axis=-1)
    soft = _softmax_np(perturbed / tau)
    return custom_op(hard, (logits,), lambda g: (_softmax_back(soft, g) / tau,))
