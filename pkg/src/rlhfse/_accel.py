"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The numba path is used when numba imports cleanly and the environment
variable ``RLHFSE_NUMBA`` is not set to ``0``. Both paths are always
importable so tests and the benchmark can compare them directly.
"""
import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and os.environ.get("RLHFSE_NUMBA", "1") != "0"


def backend():
    return "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------- numpy path


def frame_signal_np(x, n_fft, hop, n_frames):
    idx = np.arange(n_fft)[None, :] + hop * np.arange(n_frames)[:, None]
    return x[idx]


def overlap_add_np(frames, hop, out_len):
    out = np.zeros(out_len)
    n_frames, n_fft = frames.shape
    for t in range(n_frames):
        out[t * hop:t * hop + n_fft] += frames[t]
    return out


def mlp_forward_np(feats, w1, b1, w2, b2):
    h = np.tanh(feats @ w1 + b1)
    z = h @ w2 + b2
    return h, z


def mlp_backward_np(feats, h, dz, w2):
    gw2 = h.T @ dz
    gb2 = dz.sum(axis=0)
    dpre = (dz @ w2.T) * (1.0 - h * h)
    gw1 = feats.T @ dpre
    gb1 = dpre.sum(axis=0)
    return gw1, gb1, gw2, gb2


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def frame_signal_nb(x, n_fft, hop, n_frames):
        out = np.empty((n_frames, n_fft))
        for t in range(n_frames):
            base = t * hop
            for k in range(n_fft):
                out[t, k] = x[base + k]
        return out

    @njit(cache=True)
    def overlap_add_nb(frames, hop, out_len):
        out = np.zeros(out_len)
        n_frames, n_fft = frames.shape
        for t in range(n_frames):
            base = t * hop
            for k in range(n_fft):
                out[base + k] += frames[t, k]
        return out

    @njit(cache=True, inline="always")
    def _tanh(v):
        # exp form vectorizes far better than libm tanh
        e = math.exp(-2.0 * abs(v))
        t = (1.0 - e) / (1.0 + e)
        return t if v >= 0.0 else -t

    @njit(cache=True)
    def mlp_forward_nb(feats, w1, b1, w2, b2):
        n, d = feats.shape
        hdim = w1.shape[1]
        c = w2.shape[1]
        h = np.empty((n, hdim))
        z = np.empty((n, c))
        for i in range(n):
            for j in range(hdim):
                acc = b1[j]
                for k in range(d):
                    acc += feats[i, k] * w1[k, j]
                h[i, j] = _tanh(acc)
            for m in range(c):
                acc = b2[m]
                for j in range(hdim):
                    acc += h[i, j] * w2[j, m]
                z[i, m] = acc
        return h, z

    @njit(cache=True)
    def mlp_backward_nb(feats, h, dz, w2):
        n, d = feats.shape
        hdim = h.shape[1]
        c = dz.shape[1]
        gw1 = np.zeros((d, hdim))
        gb1 = np.zeros(hdim)
        gw2 = np.zeros((hdim, c))
        gb2 = np.zeros(c)
        dpre = np.empty(hdim)
        for i in range(n):
            for m in range(c):
                g = dz[i, m]
                gb2[m] += g
                for j in range(hdim):
                    gw2[j, m] += h[i, j] * g
            for j in range(hdim):
                acc = 0.0
                for m in range(c):
                    acc += dz[i, m] * w2[j, m]
                dpre[j] = acc * (1.0 - h[i, j] * h[i, j])
                gb1[j] += dpre[j]
            for k in range(d):
                f = feats[i, k]
                for j in range(hdim):
                    gw1[k, j] += f * dpre[j]
        return gw1, gb1, gw2, gb2


# ---------------------------------------------------------------- dispatch

if USE_NUMBA:
    frame_signal = frame_signal_nb
    overlap_add = overlap_add_nb
    mlp_forward = mlp_forward_nb
    mlp_backward = mlp_backward_nb
else:
    frame_signal = frame_signal_np
    overlap_add = overlap_add_np
    mlp_forward = mlp_forward_np
    mlp_backward = mlp_backward_np
