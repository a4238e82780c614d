"""Compiled inner loops for the bandwidth-heavy ops.

All kernels take contiguous ``(B, C, H, W)`` arrays. They exist purely for
speed; ``gradcore`` defines the semantics and the tests compare both against
plain loop oracles.
"""

import numba
import numpy as np

_jit = numba.njit(cache=True, fastmath={"reassoc", "contract"}, nogil=True)


@_jit
def dw_forward(x, k, along_h, left, out_len):
    b_n, c_n, h_n, w_n = x.shape
    n_taps = k.shape[1]
    if along_h:
        out = np.zeros((b_n, c_n, out_len, w_n), dtype=x.dtype)
        for b in range(b_n):
            for c in range(c_n):
                for h in range(out_len):
                    row = out[b, c, h]
                    for j in range(n_taps):
                        hh = h + j - left
                        if hh < 0 or hh >= h_n:
                            continue
                        kv = k[c, j]
                        src = x[b, c, hh]
                        for w in range(w_n):
                            row[w] += kv * src[w]
    else:
        out = np.zeros((b_n, c_n, h_n, out_len), dtype=x.dtype)
        for b in range(b_n):
            for c in range(c_n):
                for h in range(h_n):
                    row = out[b, c, h]
                    src = x[b, c, h]
                    for j in range(n_taps):
                        kv = k[c, j]
                        s = j - left
                        lo = max(0, -s)
                        hi = min(out_len, w_n - s)
                        for w in range(lo, hi):
                            row[w] += kv * src[w + s]
    return out


@_jit
def dw_backward(g, x, k, along_h, left, need_x):
    b_n, c_n, h_n, w_n = x.shape
    n_taps = k.shape[1]
    gx = np.zeros(x.shape if need_x else (0, 0, 0, 0), dtype=x.dtype)
    gk = np.zeros((c_n, n_taps), dtype=np.float64)
    out_len = g.shape[2] if along_h else g.shape[3]
    for b in range(b_n):
        for c in range(c_n):
            if along_h:
                for h in range(out_len):
                    grow = g[b, c, h]
                    for j in range(n_taps):
                        hh = h + j - left
                        if hh < 0 or hh >= h_n:
                            continue
                        kv = k[c, j]
                        src = x[b, c, hh]
                        acc = 0.0
                        for w in range(w_n):
                            acc += grow[w] * src[w]
                        gk[c, j] += acc
                        if need_x:
                            dst = gx[b, c, hh]
                            for w in range(w_n):
                                dst[w] += kv * grow[w]
            else:
                for h in range(h_n):
                    grow = g[b, c, h]
                    src = x[b, c, h]
                    for j in range(n_taps):
                        kv = k[c, j]
                        s = j - left
                        lo = max(0, -s)
                        hi = min(out_len, w_n - s)
                        acc = 0.0
                        for w in range(lo, hi):
                            acc += grow[w] * src[w + s]
                        gk[c, j] += acc
                        if need_x:
                            dst = gx[b, c, h]
                            for w in range(lo, hi):
                                dst[w + s] += kv * grow[w]
    return gx, gk


@_jit
def bn_stats(x):
    b_n, c_n, h_n, w_n = x.shape
    m = b_n * h_n * w_n
    mu = np.zeros(c_n)
    var = np.zeros(c_n)
    for c in range(c_n):
        s = 0.0
        for b in range(b_n):
            for h in range(h_n):
                for w in range(w_n):
                    s += x[b, c, h, w]
        mu[c] = s / m
        s2 = 0.0
        for b in range(b_n):
            for h in range(h_n):
                for w in range(w_n):
                    d = x[b, c, h, w] - mu[c]
                    s2 += d * d
        var[c] = s2 / m
    return mu, var


@_jit
def bn_apply(x, mu, inv, gamma, beta, relu):
    b_n, c_n, h_n, w_n = x.shape
    xhat = np.empty_like(x)
    out = np.empty_like(x)
    for b in range(b_n):
        for c in range(c_n):
            mc = mu[c]
            ic = inv[c]
            gc_ = gamma[c]
            bc = beta[c]
            for h in range(h_n):
                for w in range(w_n):
                    v = (x[b, c, h, w] - mc) * ic
                    xhat[b, c, h, w] = v
                    o = v * gc_ + bc
                    if relu and o < 0:
                        o = 0.0
                    out[b, c, h, w] = o
    return xhat, out


@_jit
def bn_backward(g, xhat, out, gamma, inv, relu, train, need_x):
    b_n, c_n, h_n, w_n = g.shape
    m = b_n * h_n * w_n
    gg = np.zeros(c_n)
    gb = np.zeros(c_n)
    for c in range(c_n):
        s_g = 0.0
        s_gx = 0.0
        for b in range(b_n):
            for h in range(h_n):
                for w in range(w_n):
                    gv = g[b, c, h, w]
                    if relu and out[b, c, h, w] <= 0:
                        gv = 0.0
                    s_g += gv
                    s_gx += gv * xhat[b, c, h, w]
        gg[c] = s_gx
        gb[c] = s_g
    gx = np.empty(g.shape if need_x else (0, 0, 0, 0), dtype=g.dtype)
    if need_x:
        for b in range(b_n):
            for c in range(c_n):
                a = gamma[c] * inv[c]
                mg = gb[c] / m
                mgx = gg[c] / m
                for h in range(h_n):
                    for w in range(w_n):
                        gv = g[b, c, h, w]
                        if relu and out[b, c, h, w] <= 0:
                            gv = 0.0
                        if train:
                            gx[b, c, h, w] = a * (gv - mg - xhat[b, c, h, w] * mgx)
                        else:
                            gx[b, c, h, w] = a * gv
    return gx, gg, gb


@_jit
def maxpool_forward(x):
    b_n, c_n, h_n, w_n = x.shape
    h2 = h_n // 2
    w2 = w_n // 2
    out = np.empty((b_n, c_n, h2, w2), dtype=x.dtype)
    arg = np.empty((b_n, c_n, h2, w2), dtype=np.int8)
    for b in range(b_n):
        for c in range(c_n):
            for i in range(h2):
                r0 = x[b, c, 2 * i]
                r1 = x[b, c, 2 * i + 1]
                for j in range(w2):
                    # window order (0,0), (0,1), (1,0), (1,1); strict > keeps the first maximum
                    best = r0[2 * j]
                    a = 0
                    if r0[2 * j + 1] > best:
                        best = r0[2 * j + 1]
                        a = 1
                    if r1[2 * j] > best:
                        best = r1[2 * j]
                        a = 2
                    if r1[2 * j + 1] > best:
                        best = r1[2 * j + 1]
                        a = 3
                    out[b, c, i, j] = best
                    arg[b, c, i, j] = a
    return out, arg


@_jit
def maxpool_backward(g, arg, h_n, w_n):
    b_n, c_n, h2, w2 = g.shape
    gx = np.zeros((b_n, c_n, h_n, w_n), dtype=g.dtype)
    for b in range(b_n):
        for c in range(c_n):
            for i in range(h2):
                for j in range(w2):
                    a = arg[b, c, i, j]
                    gx[b, c, 2 * i + a // 2, 2 * j + a % 2] = g[b, c, i, j]
    return gx
