"""Vectorised numpy routing kernels (fallback for the compiled extension).

Shapes: ``B`` samples, ``L`` layers, ``N`` experts per layer.

    f0     (B, N)           layer-1 incoming rates
    x1     (B, N, N)        routing input of each layer-1 node
    mask   (B, L*N)         active flags (0/1, may carry STE gradients)
    W      (L-1, N, N+1, N) one matrix per interior node
    rates  (B, L*N)         incoming firing rate of every node
    f_out  (B,)             output-node firing rate
    probs  (B, L-1, N, N+1) softmax partition of each interior node
    xin    (B, L-1, N, N)   routing input of each interior node
"""
from __future__ import annotations

import numpy as np


def routing_forward(f0, x1, mask, W, rates, f_out, probs, xin):
    B, N = f0.shape
    L = W.shape[0] + 1
    r = rates.reshape(B, L, N)
    m = mask.reshape(B, L, N)
    r[:] = 0
    r[:, 0] = f0
    f_out[:] = 0
    x = x1
    for l in range(L - 1):
        xin[:, l] = x
        z = np.einsum("ijk,bik->bij", W[l], x)
        z -= z.max(axis=-1, keepdims=True)
        p = np.exp(z)
        p /= p.sum(axis=-1, keepdims=True)
        probs[:, l] = p
        e = (r[:, l] * m[:, l])[:, :, None] * p
        r[:, l + 1] = e[:, :, :N].sum(axis=1)
        f_out += e[:, :, N].sum(axis=1)
        x = e[:, :, :N].transpose(0, 2, 1)
    f_out += (r[:, L - 1] * m[:, L - 1]).sum(axis=1)


def routing_backward(g_rates, g_out, mask, W, rates, probs, xin, g_f0, g_x1, g_mask, g_W):
    """Accumulate gradients into ``g_f0, g_x1, g_mask`` (overwritten) and ``g_W`` (added)."""
    B, LN = rates.shape
    L = W.shape[0] + 1
    N = LN // L
    r = rates.reshape(B, L, N)
    m = mask.reshape(B, L, N)
    gr = g_rates.reshape(B, L, N).copy()
    gm = g_mask.reshape(B, L, N)
    gm[:] = 0
    gr[:, L - 1] += g_out[:, None] * m[:, L - 1]
    gm[:, L - 1] = g_out[:, None] * r[:, L - 1]
    gx_next = None
    for l in range(L - 2, -1, -1):
        p = probs[:, l]
        # gradient reaching each emission s_{i->j}
        gs = np.empty_like(p)
        gs[:, :, :N] = gr[:, l + 1][:, None, :]
        if gx_next is not None:
            gs[:, :, :N] += gx_next.transpose(0, 2, 1)
        gs[:, :, N] = g_out[:, None]
        dot = (gs * p).sum(axis=-1)
        gr[:, l] += m[:, l] * dot
        gm[:, l] = r[:, l] * dot
        a = r[:, l] * m[:, l]
        gp = a[:, :, None] * gs
        gz = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        g_W[l] += np.einsum("bij,bik->ijk", gz, xin[:, l])
        gx = np.einsum("ijk,bij->bik", W[l], gz)
        if l == 0:
            g_x1[:] = gx
        else:
            gx_next = gx
    g_f0[:] = gr[:, 0]
