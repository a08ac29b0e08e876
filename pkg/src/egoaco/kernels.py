"""Convolution kernels, same padding, stride 1, odd kernels.

Two interchangeable backends that agree to rounding error:

* ``numba``: im2col/col2im loops compiled with ``@njit`` feeding BLAS products,
  batch-wide for small maps and per sample for large ones.
* ``numpy``: sliding-window views contracted with ``einsum``.

The backend is picked once at import time from ``EGOACO_KERNELS``
(``numba`` or ``numpy``). When unset, numba is used if it imports.
``benchmarks/bench_kernels.py`` compares the two.
"""
import os

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

try:
    import numba
    from numba import njit
    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False


def _pick_backend():
    requested = os.environ.get("EGOACO_KERNELS", "").strip().lower()
    if requested in ("", "auto"):
        return "numba" if HAVE_NUMBA else "numpy"
    if requested not in ("numba", "numpy"):
        raise ValueError(f"EGOACO_KERNELS must be 'numba' or 'numpy', got {requested!r}")
    if requested == "numba" and not HAVE_NUMBA:
        raise ValueError("EGOACO_KERNELS=numba but numba is not installed")
    return requested


BACKEND = _pick_backend()


def set_threads():
    """Apply the ``EGOACO_THREADS`` cap to numba's worker pool."""
    n = os.environ.get("EGOACO_THREADS")
    if HAVE_NUMBA and n:
        numba.set_num_threads(max(1, min(int(n), numba.config.NUMBA_NUM_THREADS)))


# ---------------------------------------------------------------- numpy path

def _windows(x, kh, kw):
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw)))
    return sliding_window_view(xp, (kh, kw), axis=(2, 3))  # B,C,H,W,kh,kw


def conv2d_forward_numpy(x, w, b):
    out = np.einsum("bchwij,ocij->bohw", _windows(x, w.shape[2], w.shape[3]), w, optimize=True)
    out += b[None, :, None, None]
    return out


def conv2d_backward_numpy(x, w, g, need_x=True, need_w=True):
    kh, kw = w.shape[2], w.shape[3]
    gx = gw = None
    if need_w:
        gw = np.einsum("bchwij,bohw->ocij", _windows(x, kh, kw), g, optimize=True)
    if need_x:
        # stride 1 + same padding: input gradient is a same-conv with the flipped, transposed kernel
        wt = np.ascontiguousarray(w.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        gx = np.einsum("bohwij,coij->bchw", _windows(g, kh, kw), wt, optimize=True)
    gb = g.sum(axis=(0, 2, 3))
    return gx, gw, gb


# ---------------------------------------------------------------- numba path

if HAVE_NUMBA:

    @njit(cache=True)
    def _im2col_nb(x, kh, kw):
        # rows: (c, di, dj); columns: output pixels (n, i, j) of the whole batch
        B, C, H, W = x.shape
        ph, pw = kh // 2, kw // 2
        HW = H * W
        cols = np.zeros((C * kh * kw, B * HW))
        for c in range(C):
            for di in range(kh):
                for dj in range(kw):
                    row = (c * kh + di) * kw + dj
                    j0, j1 = max(0, pw - dj), min(W, W + pw - dj)
                    for n in range(B):
                        for i in range(max(0, ph - di), min(H, H + ph - di)):
                            base = n * HW + i * W
                            for j in range(j0, j1):
                                cols[row, base + j] = x[n, c, i + di - ph, j + dj - pw]
        return cols

    @njit(cache=True)
    def _col2im_nb(cols, B, C, H, W, kh, kw):
        ph, pw = kh // 2, kw // 2
        HW = H * W
        gx = np.zeros((B, C, H, W))
        for c in range(C):
            for di in range(kh):
                for dj in range(kw):
                    row = (c * kh + di) * kw + dj
                    j0, j1 = max(0, pw - dj), min(W, W + pw - dj)
                    for n in range(B):
                        for i in range(max(0, ph - di), min(H, H + ph - di)):
                            base = n * HW + i * W
                            for j in range(j0, j1):
                                gx[n, c, i + di - ph, j + dj - pw] += cols[row, base + j]
        return gx


    @njit(cache=True)
    def _conv_fwd_per_sample_nb(x, w, b):
        B, C, H, W = x.shape
        O, _, kh, kw = w.shape
        wm = np.ascontiguousarray(w.reshape(O, C * kh * kw))
        out = np.empty((B, O, H, W))
        for n in range(B):
            res = np.dot(wm, _im2col_nb(x[n:n + 1], kh, kw))  # (O, HW)
            for o in range(O):
                out[n, o] = res[o].reshape(H, W) + b[o]
        return out

    @njit(cache=True)
    def _conv_bwd_per_sample_nb(x, w, g, need_x, need_w):
        B, C, H, W = x.shape
        O, _, kh, kw = w.shape
        wmt = np.ascontiguousarray(w.reshape(O, C * kh * kw).T)
        gx = np.zeros((B, C, H, W))
        gwm = np.zeros((O, C * kh * kw))
        for n in range(B):
            gm = np.ascontiguousarray(g[n]).reshape(O, H * W)
            if need_w:
                gwm += np.dot(gm, _im2col_nb(x[n:n + 1], kh, kw).T)
            if need_x:
                gx[n] = _col2im_nb(np.dot(wmt, gm), 1, C, H, W, kh, kw)[0]
        return gx, gwm.reshape(O, C, kh, kw)


# Above this many output pixels per sample, one product per sample beats one
# product per batch (the batch-wide column matrix stops fitting in cache).
PER_SAMPLE_PIXELS = 256


def conv2d_forward_numba(x, w, b):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    x = np.ascontiguousarray(x)
    if H * W >= PER_SAMPLE_PIXELS:
        return _conv_fwd_per_sample_nb(x, np.ascontiguousarray(w), np.ascontiguousarray(b))
    cols = _im2col_nb(x, kh, kw)
    out = (w.reshape(O, -1) @ cols).reshape(O, B, H, W).transpose(1, 0, 2, 3)
    return np.ascontiguousarray(out) + b[None, :, None, None]


def conv2d_backward_numba(x, w, g, need_x=True, need_w=True):
    B, C, H, W = x.shape
    O, _, kh, kw = w.shape
    x = np.ascontiguousarray(x)
    if H * W >= PER_SAMPLE_PIXELS:
        gx, gw = _conv_bwd_per_sample_nb(x, np.ascontiguousarray(w), np.ascontiguousarray(g), need_x, need_w)
        return (gx if need_x else None), (gw if need_w else None), g.sum(axis=(0, 2, 3))
    g2 = np.ascontiguousarray(g.transpose(1, 0, 2, 3)).reshape(O, B * H * W)
    gx = gw = None
    if need_w:
        gw = (g2 @ _im2col_nb(x, kh, kw).T).reshape(w.shape)
    if need_x:
        gx = _col2im_nb(w.reshape(O, -1).T @ g2, B, C, H, W, kh, kw)
    return gx, gw, g2.sum(axis=1)


def get_kernels(backend=None):
    """Return ``(forward, backward)`` for ``backend`` (default: the active one)."""
    backend = backend or BACKEND
    if backend == "numba":
        if not HAVE_NUMBA:
            raise ValueError("numba backend requested but numba is not installed")
        return conv2d_forward_numba, conv2d_backward_numba
    if backend == "numpy":
        return conv2d_forward_numpy, conv2d_backward_numpy
    raise ValueError(f"unknown kernel backend {backend!r}")
