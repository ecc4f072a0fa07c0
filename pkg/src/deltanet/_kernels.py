"""Hot inner loops with a numba path and a pure-numpy fallback.

The backend is chosen once at import time. Set ``DELTANET_NUMBA=0`` to force
the numpy path (useful for debugging and for the kernel benchmark).
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("DELTANET_NUMBA", "1") != "0"

__all__ = [
    "USE_NUMBA",
    "backend",
    "conv2d_forward",
    "conv2d_backward",
    "lstm_state_forward",
    "lstm_state_backward",
    "lstm_hidden_forward",
    "lstm_hidden_backward",
    "lcs_length",
]


def backend():
    return "numba" if USE_NUMBA else "numpy"


# --------------------------------------------------------------------------
# numpy reference path
# --------------------------------------------------------------------------


def _sigmoid_np(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def conv2d_forward_np(x, w, b, pad):
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    out = np.einsum("bchwuv,ocuv->bohw", win, w, optimize=True)
    return out + b[None, :, None, None]


def conv2d_backward_np(x, w, g, pad):
    kh, kw = w.shape[2], w.shape[3]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    dw = np.einsum("bohw,bchwuv->ocuv", g, win, optimize=True)
    db = g.sum(axis=(0, 2, 3))
    # full correlation of the output grad with the flipped kernel
    ph, pw = kh - 1 - pad, kw - 1 - pad
    gp = np.pad(g, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    gwin = sliding_window_view(gp, (kh, kw), axis=(2, 3))
    dx = np.einsum("bohwuv,ocuv->bchw", gwin, w[:, :, ::-1, ::-1], optimize=True)
    return dx, dw, db


def lstm_state_forward_np(gates, c_prev):
    d = c_prev.shape[-1]
    i = _sigmoid_np(gates[..., :d])
    f = _sigmoid_np(gates[..., d:2 * d])
    g = np.tanh(gates[..., 2 * d:3 * d])
    return f * c_prev + i * g


def lstm_state_backward_np(gates, c_prev, gc):
    d = c_prev.shape[-1]
    i = _sigmoid_np(gates[..., :d])
    f = _sigmoid_np(gates[..., d:2 * d])
    g = np.tanh(gates[..., 2 * d:3 * d])
    dgates = np.zeros_like(gates)
    dgates[..., :d] = gc * g * i * (1.0 - i)
    dgates[..., d:2 * d] = gc * c_prev * f * (1.0 - f)
    dgates[..., 2 * d:3 * d] = gc * i * (1.0 - g * g)
    return dgates, gc * f


def lstm_hidden_forward_np(gates, c):
    d = c.shape[-1]
    o = _sigmoid_np(gates[..., 3 * d:])
    return o * np.tanh(c)


def lstm_hidden_backward_np(gates, c, gh):
    d = c.shape[-1]
    o = _sigmoid_np(gates[..., 3 * d:])
    tc = np.tanh(c)
    dgates = np.zeros_like(gates)
    dgates[..., 3 * d:] = gh * tc * o * (1.0 - o)
    return dgates, gh * o * (1.0 - tc * tc)


def lcs_length_np(a, b):
    n, m = len(a), len(b)
    if n == 0 or m == 0:
        return 0
    prev = np.zeros(m + 1, dtype=np.int64)
    for i in range(n):
        eq = b == a[i]
        cur = np.zeros(m + 1, dtype=np.int64)
        for j in range(m):
            cur[j + 1] = prev[j] + 1 if eq[j] else max(prev[j + 1], cur[j])
        prev = cur
    return int(prev[m])


# --------------------------------------------------------------------------
# numba path
# --------------------------------------------------------------------------

if HAVE_NUMBA:

    @njit(cache=True)
    def _sig(v):
        if v >= 0.0:
            return 1.0 / (1.0 + np.exp(-v))
        e = np.exp(v)
        return e / (1.0 + e)

    @njit(cache=True)
    def _conv2d_forward_nb(xp, w, b):
        # xp is already zero-padded
        B, C, Hp, Wp = xp.shape
        O, _, kh, kw = w.shape
        Ho = Hp - kh + 1
        Wo = Wp - kw + 1
        out = np.empty((B, O, Ho, Wo), dtype=xp.dtype)
        for n in range(B):
            for o in range(O):
                out[n, o, :, :] = b[o]
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            wv = w[o, c, u, v]
                            for i in range(Ho):
                                for j in range(Wo):
                                    out[n, o, i, j] += wv * xp[n, c, i + u, j + v]
        return out

    @njit(cache=True)
    def _conv2d_backward_nb(xp, w, g):
        B, C, Hp, Wp = xp.shape
        O, _, kh, kw = w.shape
        Ho, Wo = g.shape[2], g.shape[3]
        dxp = np.zeros_like(xp)
        dw = np.zeros_like(w)
        db = np.zeros(O, dtype=xp.dtype)
        for n in range(B):
            for o in range(O):
                for i in range(Ho):
                    for j in range(Wo):
                        db[o] += g[n, o, i, j]
                for c in range(C):
                    for u in range(kh):
                        for v in range(kw):
                            wv = w[o, c, u, v]
                            acc = 0.0
                            for i in range(Ho):
                                for j in range(Wo):
                                    gv = g[n, o, i, j]
                                    acc += gv * xp[n, c, i + u, j + v]
                                    dxp[n, c, i + u, j + v] += gv * wv
                            dw[o, c, u, v] += acc
        return dxp, dw, db

    @njit(cache=True)
    def _im2col_nb(xp, kh, kw, Ho, Wo):
        B, C = xp.shape[0], xp.shape[1]
        cols = np.empty((B, Ho, Wo, C * kh * kw), dtype=xp.dtype)
        for n in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    q = 0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                cols[n, i, j, q] = xp[n, c, i + u, j + v]
                                q += 1
        return cols

    @njit(cache=True)
    def _col2im_nb(dcols, C, Hp, Wp, kh, kw):
        B, Ho, Wo = dcols.shape[0], dcols.shape[1], dcols.shape[2]
        dxp = np.zeros((B, C, Hp, Wp), dtype=dcols.dtype)
        for n in range(B):
            for i in range(Ho):
                for j in range(Wo):
                    q = 0
                    for c in range(C):
                        for u in range(kh):
                            for v in range(kw):
                                dxp[n, c, i + u, j + v] += dcols[n, i, j, q]
                                q += 1
        return dxp

    @njit(cache=True)
    def _lstm_state_forward_nb(gates, c_prev):
        R, D = c_prev.shape
        c = np.empty_like(c_prev)
        for r in range(R):
            for k in range(D):
                i = _sig(gates[r, k])
                f = _sig(gates[r, D + k])
                g = np.tanh(gates[r, 2 * D + k])
                c[r, k] = f * c_prev[r, k] + i * g
        return c

    @njit(cache=True)
    def _lstm_state_backward_nb(gates, c_prev, gc):
        R, D = c_prev.shape
        dgates = np.zeros_like(gates)
        dc_prev = np.empty_like(c_prev)
        for r in range(R):
            for k in range(D):
                i = _sig(gates[r, k])
                f = _sig(gates[r, D + k])
                g = np.tanh(gates[r, 2 * D + k])
                gv = gc[r, k]
                dgates[r, k] = gv * g * i * (1.0 - i)
                dgates[r, D + k] = gv * c_prev[r, k] * f * (1.0 - f)
                dgates[r, 2 * D + k] = gv * i * (1.0 - g * g)
                dc_prev[r, k] = gv * f
        return dgates, dc_prev

    @njit(cache=True)
    def _lstm_hidden_forward_nb(gates, c):
        R, D = c.shape
        h = np.empty_like(c)
        for r in range(R):
            for k in range(D):
                h[r, k] = _sig(gates[r, 3 * D + k]) * np.tanh(c[r, k])
        return h

    @njit(cache=True)
    def _lstm_hidden_backward_nb(gates, c, gh):
        R, D = c.shape
        dgates = np.zeros_like(gates)
        dc = np.empty_like(c)
        for r in range(R):
            for k in range(D):
                o = _sig(gates[r, 3 * D + k])
                tc = np.tanh(c[r, k])
                gv = gh[r, k]
                dgates[r, 3 * D + k] = gv * tc * o * (1.0 - o)
                dc[r, k] = gv * o * (1.0 - tc * tc)
        return dgates, dc

    @njit(cache=True)
    def _lcs_length_nb(a, b):
        n, m = a.shape[0], b.shape[0]
        prev = np.zeros(m + 1, dtype=np.int64)
        cur = np.zeros(m + 1, dtype=np.int64)
        for i in range(n):
            cur[0] = 0
            for j in range(m):
                if a[i] == b[j]:
                    cur[j + 1] = prev[j] + 1
                else:
                    cur[j + 1] = max(prev[j + 1], cur[j])
            for j in range(m + 1):
                prev[j] = cur[j]
        return prev[m]


# --------------------------------------------------------------------------
# dispatch
# --------------------------------------------------------------------------


def _flat2(a):
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


def _pad(x, pad):
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else np.ascontiguousarray(x)


# Below this many input channels the direct loops beat im2col + BLAS.
LOOP_CONV_MAX_CHANNELS = 4


def _conv_cols(xp, w):
    O, C, kh, kw = w.shape
    Ho, Wo = xp.shape[2] - kh + 1, xp.shape[3] - kw + 1
    return _im2col_nb(xp, kh, kw, Ho, Wo), Ho, Wo


def conv2d_forward(x, w, b, pad):
    if not USE_NUMBA:
        return conv2d_forward_np(x, w, b, pad)
    xp, w = _pad(x, pad), np.ascontiguousarray(w)
    if x.shape[1] <= LOOP_CONV_MAX_CHANNELS:
        return _conv2d_forward_nb(xp, w, b)
    cols, Ho, Wo = _conv_cols(xp, w)
    O = w.shape[0]
    out = cols.reshape(-1, cols.shape[-1]) @ w.reshape(O, -1).T + b
    return np.ascontiguousarray(out.reshape(x.shape[0], Ho, Wo, O).transpose(0, 3, 1, 2))


def conv2d_backward(x, w, g, pad):
    if not USE_NUMBA:
        return conv2d_backward_np(x, w, g, pad)
    xp, w, g = _pad(x, pad), np.ascontiguousarray(w), np.ascontiguousarray(g)
    H, W = x.shape[2], x.shape[3]
    if x.shape[1] <= LOOP_CONV_MAX_CHANNELS:
        dxp, dw, db = _conv2d_backward_nb(xp, w, g)
    else:
        O, C, kh, kw = w.shape
        cols, Ho, Wo = _conv_cols(xp, w)
        gm = g.transpose(0, 2, 3, 1).reshape(-1, O)
        dw = (gm.T @ cols.reshape(-1, cols.shape[-1])).reshape(w.shape)
        db = gm.sum(axis=0)
        dcols = np.ascontiguousarray((gm @ w.reshape(O, -1)).reshape(x.shape[0], Ho, Wo, -1))
        dxp = _col2im_nb(dcols, C, xp.shape[2], xp.shape[3], kh, kw)
    return np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W]), dw, db


def lstm_state_forward(gates, c_prev):
    if USE_NUMBA:
        return _lstm_state_forward_nb(_flat2(gates), _flat2(c_prev)).reshape(c_prev.shape)
    return lstm_state_forward_np(gates, c_prev)


def lstm_state_backward(gates, c_prev, gc):
    if USE_NUMBA:
        dg, dc = _lstm_state_backward_nb(_flat2(gates), _flat2(c_prev), _flat2(gc))
        return dg.reshape(gates.shape), dc.reshape(c_prev.shape)
    return lstm_state_backward_np(gates, c_prev, gc)


def lstm_hidden_forward(gates, c):
    if USE_NUMBA:
        return _lstm_hidden_forward_nb(_flat2(gates), _flat2(c)).reshape(c.shape)
    return lstm_hidden_forward_np(gates, c)


def lstm_hidden_backward(gates, c, gh):
    if USE_NUMBA:
        dg, dc = _lstm_hidden_backward_nb(_flat2(gates), _flat2(c), _flat2(gh))
        return dg.reshape(gates.shape), dc.reshape(c.shape)
    return lstm_hidden_backward_np(gates, c, gh)


def lcs_length(a, b):
    """Length of the longest common subsequence of two integer sequences."""
    a = np.asarray(a, dtype=np.int64)
    b = np.asarray(b, dtype=np.int64)
    if USE_NUMBA:
        return int(_lcs_length_nb(a, b))
    return lcs_length_np(a, b)
