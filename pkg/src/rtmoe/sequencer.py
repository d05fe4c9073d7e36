"""Activation sequences: grow the active expert set one node at a time.

At every step the candidates are the not-yet-active nodes plus the output
node, each weighted by the firing rate it currently receives. One candidate
is drawn with a straight-through Gumbel-softmax sample; the sequence stops
when the output node is drawn and the expert set from just before that draw
is the one used for prediction.

Samples are processed as a batch: every row keeps its own mask and stops
contributing (its draws are zeroed) once it has picked the output node.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .routing import ActiveMask, RoutingParams, layer1_inputs, route

LOG_EPS = 1e-20
STOP_RULES = ("sample", "dominant")


class SequenceError(RuntimeError):
    pass


@dataclass
class Step:
    node: int                 # flat node index; L*N_e is the output node
    mask: np.ndarray          # active flags after the choice, length L*N_e + 1
    probs: np.ndarray         # candidate rates before the choice, length L*N_e + 1


@dataclass
class ActivationSequence:
    steps: list
    final_mask: ActiveMask
    n_layers: int
    n_experts: int

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def nodes(self) -> list:
        return [s.node for s in self.steps]


@dataclass
class SequenceBatch:
    """Result of :func:`build_sequences` for a batch of samples."""

    final_mask: Tensor        # (B, L*N_e), carries the straight-through gradient
    chosen: np.ndarray        # (B, S) node index per step, -1 after the stop
    probs: np.ndarray         # (B, S, L*N_e + 1) candidate rates before each step
    lengths: np.ndarray       # (B,) number of steps including the output draw
    n_layers: int
    n_experts: int

    def __len__(self) -> int:
        return len(self.lengths)

    @property
    def n_active(self) -> np.ndarray:
        return self.lengths - 1

    def sequence(self, b: int) -> ActivationSequence:
        M = self.n_layers * self.n_experts
        mask = np.zeros(M + 1, dtype=bool)
        steps = []
        for t in range(self.lengths[b]):
            node = int(self.chosen[b, t])
            mask = mask.copy()
            mask[node] = True
            steps.append(Step(node, mask, self.probs[b, t].copy()))
        return ActivationSequence(steps, ActiveMask(self.final_mask.data[b] > 0.5),
                                  self.n_layers, self.n_experts)


def sample_noise(keys, n_steps: int, n_candidates: int, dtype=None) -> np.ndarray:
    """Gumbel noise ``(B, n_steps, n_candidates)`` from one rng stream per key.

    A key is anything ``np.random.default_rng`` accepts, typically
    ``(seed, epoch, sample_index)``, so a sample's draws do not depend on
    which batch or worker processes it.
    """
    out = np.empty((len(keys), n_steps, n_candidates), dtype=dtype or ad.get_dtype())
    for b, key in enumerate(keys):
        out[b] = ad.gumbel_noise(np.random.default_rng(key), (n_steps, n_candidates), out.dtype)
    return out


def build_sequences(f0: Tensor, params: RoutingParams, tau: float, noise: np.ndarray,
                    layer1: str = "f0", stop_rule: str = "sample",
                    backend: str | None = None) -> SequenceBatch:
    """Run the activation-sequence loop for a batch ``f0`` of shape ``(B, N_e)``.

    ``noise`` is ``(B, L*N_e + 1, L*N_e + 1)`` Gumbel noise, one row per step.
    The whole loop is recorded on the active tape.
    """
    if tau <= 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if stop_rule not in STOP_RULES:
        raise ValueError(f"unknown stop rule {stop_rule!r}")
    B, N = f0.shape
    L = params.n_layers
    M = L * N
    S = M + 1
    if noise.shape != (B, S, M + 1):
        raise ValueError(f"noise must have shape {(B, S, M + 1)}, got {noise.shape}")
    dt = f0.dtype
    x1 = layer1_inputs(f0, layer1)
    ones = ad.Tensor(np.ones((B, M), dtype=dt))
    A = ad.Tensor(np.zeros((B, M + 1), dtype=dt))
    P = ad.concat([f0, ad.Tensor(np.zeros((B, M - N + 1), dtype=dt))], axis=1)
    done = np.zeros(B, dtype=bool)
    chosen = np.full((B, S), -1, dtype=np.int64)
    probs = np.zeros((B, S, M + 1), dtype=dt)
    lengths = np.zeros(B, dtype=np.int64)

    for t in range(S):
        live = ~done
        probs[live, t] = P.data[live]
        logits = ad.log_rates(P, LOG_EPS)
        with np.errstate(invalid="ignore"):
            pick = np.argmax(logits.data + noise[:, t], axis=1)
        force = np.full(B, -1, dtype=np.int64)
        if stop_rule == "dominant":
            dominant = P.data[:, M] > P.data[:, :M].max(axis=1)
            force[dominant] = M
            pick = np.where(dominant, M, pick)
        # output drawn with no expert yet: take the strongest layer-1 expert instead
        empty = (pick == M) & (A.data[:, :M].sum(axis=1) == 0)
        if empty.any():
            force[empty] = np.argmax(P.data[empty, :N], axis=1)
            pick = np.where(empty, force, pick)
        C = ad.gumbel_softmax_ste(logits, tau, noise=noise[:, t], force=force)
        C = ad.scale_rows(C, ad.Tensor(live.astype(dt)))
        A = ad.add(A, C)
        chosen[live, t] = pick[live]
        lengths[live] += 1
        done = done | (live & (pick == M))
        if done.all():
            break
        expert_mask = A[:, :M]
        rates, f_out, _ = route(f0, x1, expert_mask, params.weights, backend)
        P = ad.concat([ad.mul(rates, ad.sub(ones, expert_mask)), ad.reshape(f_out, (B, 1))], axis=1)
    else:
        raise SequenceError(f"activation sequence did not stop within {S} steps")

    # rows have stopped, so the expert part of A equals the set preceding the output draw
    final = A[:, :M]
    return SequenceBatch(final, chosen, probs, lengths, L, N)


def build_sequence(f0: Tensor, params: RoutingParams, tau: float, rng: np.random.Generator,
                   **kwargs) -> ActivationSequence:
    """Single-sample convenience wrapper around :func:`build_sequences`."""
    if f0.ndim == 1:
        f0 = ad.reshape(f0, (1, -1))
    M = params.n_layers * params.n_experts
    noise = ad.gumbel_noise(rng, (1, M + 1, M + 1), f0.dtype)
    return build_sequences(f0, params, tau, noise, **kwargs).sequence(0)


def sequence_prefixes(seq: ActivationSequence) -> list:
    """Expert-only masks after each non-final step, i.e. prefixes of size 1..T-1."""
    M = seq.n_layers * seq.n_experts
    return [ActiveMask(s.mask[:M].copy()) for s in seq.steps[:-1]]
