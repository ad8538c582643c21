"""Fused elementwise kernels used by the autodiff ops.

Each kernel has a numba ``@njit`` implementation and a pure-numpy fallback
with the same math. The numba path is used when numba imports and the
environment variable ``TAT_USE_NUMBA`` is not ``"0"``; it is read once at
import time.

Transcendentals (``exp``, ``tanh``) always go through numpy ufuncs, which are
SIMD-vectorised; numba without SVML evaluates them one element at a time and
loses by 3-10x. Numba fuses the arithmetic around them (row reductions,
normalisation, the GELU and layer-norm backward passes), where it removes
several full-array temporaries.

Kernels take 2-D C-contiguous arrays whose last axis is the reduction axis.
Each path is bit-deterministic; the two paths may differ in the last bits.
"""

from __future__ import annotations

import math
import os

import numpy as np

GELU_C = math.sqrt(2.0 / math.pi)  # 0.7978845608028654
GELU_A = 0.044715

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    _HAVE_NUMBA = False


def numba_requested() -> bool:
    return os.environ.get("TAT_USE_NUMBA", "1") != "0"


USE_NUMBA = _HAVE_NUMBA and numba_requested()


# --------------------------------------------------------------------------
# numpy path
# --------------------------------------------------------------------------


def _softmax_shift_np(x):
    return x - x.max(axis=-1, keepdims=True)


def _softmax_normalize_np(e):
    return e / e.sum(axis=-1, keepdims=True)


def _softmax_bwd_np(y, gy):
    return y * (gy - (gy * y).sum(axis=-1, keepdims=True))


def _layer_norm_fwd_np(x, gain, bias, eps):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gain + bias, xhat, rstd[:, 0]


def _layer_norm_bwd_np(gy, xhat, rstd, gain):
    g_gain = (gy * xhat).sum(axis=0)
    g_bias = gy.sum(axis=0)
    gxhat = gy * gain
    a = gxhat.mean(axis=-1, keepdims=True)
    b = (gxhat * xhat).mean(axis=-1, keepdims=True)
    return (gxhat - a - xhat * b) * rstd[:, None], g_gain, g_bias


def _gelu_inner_np(x):
    return GELU_C * (x + GELU_A * x * x * x)


def _gelu_out_np(x, t):
    return 0.5 * x * (1.0 + t)


def _gelu_bwd_np(x, t, gy):
    du = GELU_C * (1.0 + 3.0 * GELU_A * x * x)
    return gy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if _HAVE_NUMBA:

    @numba.njit(cache=True)
    def _softmax_shift_nb(x):
        n, d = x.shape
        out = np.empty_like(x)
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            for j in range(d):
                out[i, j] = x[i, j] - m
        return out

    @numba.njit(cache=True)
    def _softmax_normalize_nb(e):
        n, d = e.shape
        for i in range(n):
            s = e[i, 0] * 0
            for j in range(d):
                s += e[i, j]
            for j in range(d):
                e[i, j] = e[i, j] / s
        return e

    @numba.njit(cache=True)
    def _softmax_bwd_nb(y, gy):
        n, d = y.shape
        out = np.empty_like(y)
        for i in range(n):
            s = y[i, 0] * 0
            for j in range(d):
                s += gy[i, j] * y[i, j]
            for j in range(d):
                out[i, j] = y[i, j] * (gy[i, j] - s)
        return out

    @numba.njit(cache=True)
    def _layer_norm_fwd_nb(x, gain, bias, eps):
        n, d = x.shape
        y = np.empty_like(x)
        xhat = np.empty_like(x)
        rstd = np.empty(n, dtype=x.dtype)
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / math.sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                h = (x[i, j] - mu) * r
                xhat[i, j] = h
                y[i, j] = h * gain[j] + bias[j]
        return y, xhat, rstd

    @numba.njit(cache=True)
    def _layer_norm_bwd_nb(gy, xhat, rstd, gain):
        n, d = gy.shape
        gx = np.empty_like(gy)
        g_gain = np.zeros(d, dtype=gy.dtype)
        g_bias = np.zeros(d, dtype=gy.dtype)
        for i in range(n):
            a = 0.0
            b = 0.0
            for j in range(d):
                gh = gy[i, j] * gain[j]
                a += gh
                b += gh * xhat[i, j]
                g_gain[j] += gy[i, j] * xhat[i, j]
                g_bias[j] += gy[i, j]
            a /= d
            b /= d
            r = rstd[i]
            for j in range(d):
                gx[i, j] = (gy[i, j] * gain[j] - a - xhat[i, j] * b) * r
        return gx, g_gain, g_bias

    @numba.njit(cache=True)
    def _gelu_inner_nb(x):
        n, d = x.shape
        out = np.empty_like(x)
        c = x.dtype.type(GELU_C)
        a = x.dtype.type(GELU_A)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                out[i, j] = c * (v + a * v * v * v)
        return out

    @numba.njit(cache=True)
    def _gelu_out_nb(x, t):
        n, d = x.shape
        out = np.empty_like(x)
        half = x.dtype.type(0.5)
        one = x.dtype.type(1.0)
        for i in range(n):
            for j in range(d):
                out[i, j] = half * x[i, j] * (one + t[i, j])
        return out

    @numba.njit(cache=True)
    def _gelu_bwd_nb(x, t, gy):
        n, d = x.shape
        out = np.empty_like(x)
        c = x.dtype.type(GELU_C)
        a3 = x.dtype.type(3.0 * GELU_A)
        half = x.dtype.type(0.5)
        one = x.dtype.type(1.0)
        for i in range(n):
            for j in range(d):
                v = x[i, j]
                tt = t[i, j]
                du = c * (one + a3 * v * v)
                out[i, j] = gy[i, j] * (half * (one + tt) + half * v * (one - tt * tt) * du)
        return out


def _select(name):
    if USE_NUMBA:
        return globals()[name + "_nb"]
    return globals()[name + "_np"]


def _c2d(x):
    return np.ascontiguousarray(x.reshape(-1, x.shape[-1]))


def softmax_lastaxis(x):
    shifted = _select("_softmax_shift")(_c2d(x))
    e = np.exp(shifted)
    return _select("_softmax_normalize")(e).reshape(x.shape)


def softmax_lastaxis_grad(y, gy):
    return _select("_softmax_bwd")(_c2d(y), _c2d(gy)).reshape(y.shape)


def layer_norm(x, gain, bias, eps):
    """Return ``(y, xhat, rstd)`` normalising over the last axis."""
    y, xhat, rstd = _select("_layer_norm_fwd")(_c2d(x), gain, bias, eps)
    return y.reshape(x.shape), xhat, rstd


def layer_norm_grad(gy, xhat, rstd, gain):
    gx, g_gain, g_bias = _select("_layer_norm_bwd")(_c2d(gy), xhat, rstd, gain)
    return gx.reshape(gy.shape), g_gain, g_bias


def gelu(x):
    """Return ``(y, t)`` where ``t`` is the tanh term, cached for the backward pass."""
    x2 = _c2d(x)
    t = np.tanh(_select("_gelu_inner")(x2))
    return _select("_gelu_out")(x2, t).reshape(x.shape), t


def gelu_grad(x, t, gy):
    return _select("_gelu_bwd")(_c2d(x), t, _c2d(gy)).reshape(x.shape)
