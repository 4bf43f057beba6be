"""Fused single-pass kernels for the memory-bound elementwise ops.

Each kernel works on a C-contiguous 2-D view (rows x last axis). The numpy
expressions these replace make one full pass per arithmetic step; at training
sizes that memory traffic, not arithmetic, dominates the step time.
"""

from __future__ import annotations

import math

import numpy as np
from numba import njit

_C = math.sqrt(2.0 / math.pi)
_A = 0.044715


@njit(cache=True, error_model="numpy")
def _gelu_arg(x, m2z):
    xf, mf = x.ravel(), m2z.ravel()
    for i in range(xf.size):
        v = xf[i]
        # clamp keeps exp finite; the sigmoid is already 0 to double precision there
        mf[i] = min(-2.0 * _C * (v + _A * v * v * v), 700.0)


@njit(cache=True, error_model="numpy")
def _gelu_finish(x, e, out):
    xf, ef, of = x.ravel(), e.ravel(), out.ravel()
    for i in range(xf.size):
        s = 1.0 / (1.0 + ef[i])
        ef[i] = s
        of[i] = xf[i] * s


def gelu_fwd(x, out, sig):
    """out = x * sigmoid(2z), z = c (x + a x^3); ``sig`` keeps sigmoid(2z) for the backward.

    The exponential goes through numpy, whose vectorised exp is several times
    faster than the scalar libm call a compiled loop would make.
    """
    _gelu_arg(x, sig)
    np.exp(sig, out=sig)
    _gelu_finish(x, sig, out)


@njit(cache=True, error_model="numpy")
def gelu_bwd(x, sig, g, gx):
    n = x.size
    xf, sf, gf, gxf = x.ravel(), sig.ravel(), g.ravel(), gx.ravel()
    for i in range(n):
        v = xf[i]
        s = sf[i]
        dz = _C * (1.0 + 3.0 * _A * v * v)
        gxf[i] = gf[i] * (s + 2.0 * v * s * (1.0 - s) * dz)


@njit(cache=True, error_model="numpy")
def layer_norm_fwd(x, w, b, eps, out, xhat, inv):
    rows, c = x.shape
    for r in range(rows):
        mu = 0.0
        for j in range(c):
            mu += x[r, j]
        mu /= c
        var = 0.0
        for j in range(c):
            d = x[r, j] - mu
            var += d * d
        iv = 1.0 / math.sqrt(var / c + eps)
        inv[r] = iv
        for j in range(c):
            h = (x[r, j] - mu) * iv
            xhat[r, j] = h
            out[r, j] = h * w[j] + b[j]


@njit(cache=True, error_model="numpy")
def layer_norm_bwd(g, w, xhat, inv, gx, gw, gb):
    """Input grad into ``gx``; weight / bias grads accumulated into ``gw`` / ``gb``."""
    rows, c = g.shape
    for r in range(rows):
        m1 = 0.0
        m2 = 0.0
        for j in range(c):
            d = g[r, j] * w[j]
            m1 += d
            m2 += d * xhat[r, j]
            gw[j] += g[r, j] * xhat[r, j]
            gb[j] += g[r, j]
        m1 /= c
        m2 /= c
        iv = inv[r]
        for j in range(c):
            gx[r, j] = iv * (g[r, j] * w[j] - m1 - xhat[r, j] * m2)


@njit(cache=True, error_model="numpy")
def _shift_by_max(x, out):
    rows, c = x.shape
    for r in range(rows):
        m = x[r, 0]
        for j in range(1, c):
            if x[r, j] > m:
                m = x[r, j]
        for j in range(c):
            out[r, j] = x[r, j] - m


@njit(cache=True, error_model="numpy")
def _normalize_rows(e):
    rows, c = e.shape
    for r in range(rows):
        t = 0.0
        for j in range(c):
            t += e[r, j]
        for j in range(c):
            e[r, j] /= t


def softmax_fwd(x, out):
    _shift_by_max(x, out)
    np.exp(out, out=out)
    _normalize_rows(out)


@njit(cache=True, error_model="numpy")
def softmax_bwd(s, g, gx):
    rows, c = s.shape
    for r in range(rows):
        dot = 0.0
        for j in range(c):
            dot += g[r, j] * s[r, j]
        for j in range(c):
            gx[r, j] = s[r, j] * (g[r, j] - dot)


def rows(a: np.ndarray) -> np.ndarray:
    """C-contiguous (rows, last) view, copying only when needed."""
    a = np.ascontiguousarray(a, dtype=np.float64)
    return a.reshape(-1, a.shape[-1]) if a.ndim != 2 else a
