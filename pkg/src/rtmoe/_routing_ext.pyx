# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled routing kernels; same contract as ``rtmoe._routing_py``."""
from libc.math cimport exp
from libc.stdlib cimport malloc, free

ctypedef fused real:
    float
    double


def routing_forward(real[:, ::1] f0, real[:, :, ::1] x1, real[:, ::1] mask,
                    real[:, :, :, ::1] W, real[:, ::1] rates, real[::1] f_out,
                    real[:, :, :, ::1] probs, real[:, :, :, ::1] xin):
    cdef Py_ssize_t B = f0.shape[0], N = f0.shape[1], L = W.shape[0] + 1
    cdef Py_ssize_t b, l, i, j, k, base, nxt
    cdef double zmax, tot, a, e, acc, out
    cdef double *z = <double *> malloc((N + 1) * sizeof(double))
    try:
        with nogil:
            for b in range(B):
                for i in range(L * N):
                    rates[b, i] = 0
                for i in range(N):
                    rates[b, i] = f0[b, i]
                    for k in range(N):
                        xin[b, 0, i, k] = x1[b, i, k]
                out = 0
                for l in range(L - 1):
                    base = l * N
                    nxt = base + N
                    for i in range(N):
                        zmax = -1e300
                        for j in range(N + 1):
                            acc = 0
                            for k in range(N):
                                acc = acc + W[l, i, j, k] * xin[b, l, i, k]
                            z[j] = acc
                            if acc > zmax:
                                zmax = acc
                        tot = 0
                        for j in range(N + 1):
                            z[j] = exp(z[j] - zmax)
                            tot = tot + z[j]
                        a = rates[b, base + i] * mask[b, base + i]
                        for j in range(N + 1):
                            probs[b, l, i, j] = <real> (z[j] / tot)
                            e = a * probs[b, l, i, j]
                            if j < N:
                                rates[b, nxt + j] += <real> e
                                if l + 1 < L - 1:
                                    xin[b, l + 1, j, i] = <real> e
                            else:
                                out = out + e
                base = (L - 1) * N
                for i in range(N):
                    out = out + rates[b, base + i] * mask[b, base + i]
                f_out[b] = <real> out
    finally:
        free(z)


def routing_backward(real[:, ::1] g_rates, real[::1] g_out, real[:, ::1] mask,
                     real[:, :, :, ::1] W, real[:, ::1] rates, real[:, :, :, ::1] probs,
                     real[:, :, :, ::1] xin, real[:, ::1] g_f0, real[:, :, ::1] g_x1,
                     real[:, ::1] g_mask, real[:, :, :, ::1] g_W):
    cdef Py_ssize_t B = rates.shape[0], L = W.shape[0] + 1
    cdef Py_ssize_t N = rates.shape[1] // L
    cdef Py_ssize_t b, l, i, j, k, base, nxt, idx
    cdef double go, dot, a, sp, gsj, gxk
    cdef double *gr = <double *> malloc(L * N * sizeof(double))
    cdef double *gx = <double *> malloc(L * N * N * sizeof(double))
    cdef double *gs = <double *> malloc((N + 1) * sizeof(double))
    cdef double *gz = <double *> malloc((N + 1) * sizeof(double))
    try:
        with nogil:
            for b in range(B):
                go = g_out[b]
                for i in range(L * N):
                    gr[i] = g_rates[b, i]
                    g_mask[b, i] = 0
                for i in range(L * N * N):
                    gx[i] = 0
                base = (L - 1) * N
                for i in range(N):
                    gr[base + i] += go * mask[b, base + i]
                    g_mask[b, base + i] = <real> (go * rates[b, base + i])
                for l in range(L - 2, -1, -1):
                    base = l * N
                    nxt = base + N
                    for i in range(N):
                        idx = base + i
                        dot = 0
                        for j in range(N + 1):
                            if j < N:
                                # gx[(l+1), j, i]: grad of node (l+1, j) input entry i
                                gsj = gr[nxt + j] + gx[(nxt + j) * N + i]
                            else:
                                gsj = go
                            gs[j] = gsj
                            dot = dot + gsj * probs[b, l, i, j]
                        gr[idx] += mask[b, idx] * dot
                        g_mask[b, idx] = <real> (rates[b, idx] * dot)
                        a = rates[b, idx] * mask[b, idx]
                        sp = 0
                        for j in range(N + 1):
                            sp = sp + a * gs[j] * probs[b, l, i, j]
                        for j in range(N + 1):
                            gz[j] = probs[b, l, i, j] * (a * gs[j] - sp)
                            for k in range(N):
                                g_W[l, i, j, k] += <real> (gz[j] * xin[b, l, i, k])
                        for k in range(N):
                            gxk = 0
                            for j in range(N + 1):
                                gxk = gxk + W[l, i, j, k] * gz[j]
                            if l == 0:
                                g_x1[b, i, k] = <real> gxk
                            else:
                                gx[idx * N + k] = gxk
                for i in range(N):
                    g_f0[b, i] = <real> gr[i]
    finally:
        free(gr)
        free(gx)
        free(gs)
        free(gz)
