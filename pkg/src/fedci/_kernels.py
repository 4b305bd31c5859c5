"""Fused LayerNorm -> ReLU -> inverted-dropout kernels over (rows, width) arrays.

``keep`` holds the dropout multiplier per element (0 or 1/(1-p)); callers
pass an all-ones array when dropout is inactive.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True)
def block_forward(z, gamma, beta, eps, keep):
    M, H = z.shape
    y = np.empty_like(z)
    xhat = np.empty_like(z)
    inv = np.empty(M, dtype=z.dtype)
    zero = z.dtype.type(0)
    for r in range(M):
        mu = zero
        for j in range(H):
            mu += z[r, j]
        mu /= H
        var = zero
        for j in range(H):
            d = z[r, j] - mu
            var += d * d
        var /= H
        s = 1 / np.sqrt(var + eps)
        inv[r] = s
        for j in range(H):
            xh = (z[r, j] - mu) * s
            xhat[r, j] = xh
            v = xh * gamma[j] + beta[j]
            y[r, j] = max(v, zero) * keep[r, j]
    return y, xhat, inv


@njit(cache=True, fastmath=True)
def block_backward(g, xhat, inv, gamma, beta, keep, dgamma, dbeta, want_dz):
    M, H = g.shape
    dz = np.empty_like(g)
    gl = np.empty(H, dtype=g.dtype)
    zero = g.dtype.type(0)
    for r in range(M):
        a = zero
        b = zero
        for j in range(H):
            xh = xhat[r, j]
            v = xh * gamma[j] + beta[j]
            gg = g[r, j] * keep[r, j] if v > zero else zero
            gl[j] = gg
            dgamma[j] += gg * xh
            dbeta[j] += gg
            gx = gg * gamma[j]
            a += gx
            b += gx * xh
        if want_dz:
            a /= H
            b /= H
            s = inv[r]
            for j in range(H):
                dz[r, j] = (gl[j] * gamma[j] - a - xhat[r, j] * b) * s
    return dz


@njit(cache=True)
def scatter_add_rows(out, idx, rows):
    for i in range(idx.shape[0]):
        r = idx[i]
        for j in range(rows.shape[1]):
            out[r, j] += rows[i, j]


@njit(cache=True)
def dropout_keep(key, threshold, scale, out):
    """Fill ``out`` (flat) with 0 or ``scale`` from a splitmix64 hash of (key, index).

    Element i is dropped when the top 16 bits of its hash fall below
    ``threshold``; the result depends only on ``key`` and i.
    """
    golden = np.uint64(0x9E3779B97F4A7C15)
    m1 = np.uint64(0xBF58476D1CE4E5B9)
    m2 = np.uint64(0x94D049BB133111EB)
    thr = np.uint64(threshold)
    zero = out.dtype.type(0)
    for i in range(out.shape[0]):
        h = key + golden * np.uint64(i + 1)
        h = (h ^ (h >> np.uint64(30))) * m1
        h = (h ^ (h >> np.uint64(27))) * m2
        h = h ^ (h >> np.uint64(31))
        out[i] = scale if (h >> np.uint64(48)) >= thr else zero
