"""Convolution kernels: numba-jitted inner loops with a pure-numpy fallback.

The backend is chosen once at import time from the ``JMOD2_BACKEND``
environment variable ("numba" or "numpy"; default "numba" when numba is
importable). ``JMOD2_THREADS`` caps the numba thread pool. Both backends
compute the same convolutions; results agree to float round-off, and each
backend is bit-deterministic run to run (parallel loops only ever write
disjoint output slices; reductions stay sequential per output element).

Only stride-1 convolutions are needed here: downsampling is average pooling
and upsampling is bilinear, both cheap enough to stay vectorized numpy in
the model module. The numba kernels keep the innermost loop contiguous over
image rows so it vectorizes; the numpy fallback contracts an explicit
channels-last im2col buffer with one BLAS matmul per call.
"""

import os

import numpy as np

try:
    import numba
    from numba import njit, prange

    _HAS_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAS_NUMBA = False

_VALID_BACKENDS = ("numba", "numpy")
_backend = os.environ.get("JMOD2_BACKEND", "numba" if _HAS_NUMBA else "numpy")
if _backend not in _VALID_BACKENDS:
    raise ValueError(f"JMOD2_BACKEND must be one of {_VALID_BACKENDS}, got {_backend!r}")
if _backend == "numba" and not _HAS_NUMBA:
    _backend = "numpy"

if _HAS_NUMBA:
    _threads = os.environ.get("JMOD2_THREADS")
    if _threads:
        numba.set_num_threads(max(1, min(int(_threads), numba.config.NUMBA_NUM_THREADS)))


def get_backend() -> str:
    return _backend


def set_backend(name: str) -> None:
    """Override the kernel backend (used by tests and the benchmark)."""
    global _backend
    if name not in _VALID_BACKENDS:
        raise ValueError(f"backend must be one of {_VALID_BACKENDS}, got {name!r}")
    if name == "numba" and not _HAS_NUMBA:
        raise RuntimeError("numba backend requested but numba is not importable")
    _backend = name


def _pad2d(x, pad):
    if pad == 0:
        return np.ascontiguousarray(x)
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _im2col(xp, kh, kw):
    """Contiguous (N*OH*OW, C*KH*KW) patch matrix from a padded NCHW array."""
    n, c, hp, wp = xp.shape
    oh, ow = hp - kh + 1, wp - kw + 1
    cols = np.empty((n, oh, ow, c, kh, kw), xp.dtype)
    for a in range(kh):
        for b in range(kw):
            cols[..., a, b] = xp[:, :, a : a + oh, b : b + ow].transpose(0, 2, 3, 1)
    return cols.reshape(n * oh * ow, c * kh * kw), oh, ow


def _conv2d_np(x, w, b, pad):
    f, c, kh, kw = w.shape
    xp = _pad2d(x, pad)
    cols, oh, ow = _im2col(xp, kh, kw)
    y = cols @ w.reshape(f, c * kh * kw).T
    y += b
    return np.ascontiguousarray(y.reshape(x.shape[0], oh, ow, f).transpose(0, 3, 1, 2))


def _conv2d_backward_np(x, w, dy, pad):
    f, c, kh, kw = w.shape
    n = x.shape[0]
    db = dy.sum(axis=(0, 2, 3))
    xp = _pad2d(x, pad)
    cols, oh, ow = _im2col(xp, kh, kw)
    dy_mat = np.ascontiguousarray(dy.transpose(0, 2, 3, 1)).reshape(n * oh * ow, f)
    dw = (dy_mat.T @ cols).reshape(f, c, kh, kw)
    # dx is the full correlation of dy with the flipped kernel.
    dyp = _pad2d(dy, kh - 1 - pad)
    dcols, h, wd = _im2col(dyp, kh, kw)
    wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
    dx = dcols @ wflip.reshape(c, f * kh * kw).T
    return (
        np.ascontiguousarray(dx.reshape(n, h, wd, c).transpose(0, 3, 1, 2)),
        dw,
        db,
    )


if _HAS_NUMBA:

    @njit(cache=True, parallel=True, fastmath=True)
    def _conv2d_nb(xp, w, b):
        n, c, hp, wp = xp.shape
        f, _, kh, kw = w.shape
        oh, ow = hp - kh + 1, wp - kw + 1
        y = np.empty((n, f, oh, ow), xp.dtype)
        for nf in prange(n * f):
            i = nf // f
            j = nf % f
            acc = np.full((oh, ow), b[j], xp.dtype)
            if kw == 3:  # the hot case: one fused pass per (channel, row) pair
                for ci in range(c):
                    for a in range(kh):
                        w0 = w[j, ci, a, 0]
                        w1 = w[j, ci, a, 1]
                        w2 = w[j, ci, a, 2]
                        for p in range(oh):
                            xrow = xp[i, ci, p + a]
                            arow = acc[p]
                            for q in range(ow):
                                arow[q] += w0 * xrow[q] + w1 * xrow[q + 1] + w2 * xrow[q + 2]
            else:
                for ci in range(c):
                    for a in range(kh):
                        for bb in range(kw):
                            wv = w[j, ci, a, bb]
                            for p in range(oh):
                                xrow = xp[i, ci, p + a]
                                arow = acc[p]
                                for q in range(ow):
                                    arow[q] += wv * xrow[q + bb]
            y[i, j] = acc
        return y

    @njit(cache=True, parallel=True, fastmath=True)
    def _conv2d_dw_nb(xp, dy):
        n, c, hp, wp = xp.shape
        f, oh, ow = dy.shape[1], dy.shape[2], dy.shape[3]
        kh, kw = hp - oh + 1, wp - ow + 1
        dw = np.empty((f, c, kh, kw), xp.dtype)
        db = np.zeros(f, xp.dtype)
        # Loop order keeps each dy row hot while it is dotted against every
        # kernel tap, so xp streams only kh times per filter.
        for j in prange(f):
            acc = np.zeros((c, kh, kw), xp.dtype)
            acc_b = 0.0
            for i in range(n):
                for p in range(oh):
                    drow = dy[i, j, p]
                    for q in range(ow):
                        acc_b += drow[q]
                    if kw == 3:
                        for ci in range(c):
                            for a in range(kh):
                                xrow = xp[i, ci, p + a]
                                s0 = 0.0
                                s1 = 0.0
                                s2 = 0.0
                                for q in range(ow):
                                    dq = drow[q]
                                    s0 += dq * xrow[q]
                                    s1 += dq * xrow[q + 1]
                                    s2 += dq * xrow[q + 2]
                                acc[ci, a, 0] += s0
                                acc[ci, a, 1] += s1
                                acc[ci, a, 2] += s2
                    else:
                        for ci in range(c):
                            for a in range(kh):
                                xrow = xp[i, ci, p + a]
                                for bb in range(kw):
                                    s = 0.0
                                    for q in range(ow):
                                        s += drow[q] * xrow[q + bb]
                                    acc[ci, a, bb] += s
            dw[j] = acc
            db[j] = acc_b
        return dw, db


def conv2d(x, w, b, pad=0):
    """Stride-1 2D convolution, NCHW layout, zero padding."""
    if _backend == "numba":
        return _conv2d_nb(_pad2d(x, pad), np.ascontiguousarray(w), np.ascontiguousarray(b))
    return _conv2d_np(x, w, b, pad)


def conv2d_backward(x, w, dy, pad=0):
    """Gradients of ``conv2d`` w.r.t. input, weights and bias."""
    if _backend == "numba":
        kh = w.shape[2]
        dy = np.ascontiguousarray(dy)
        dw, db = _conv2d_dw_nb(_pad2d(x, pad), dy)
        wflip = np.ascontiguousarray(w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3))
        dyp = _pad2d(dy, kh - 1 - pad)
        dx = _conv2d_nb(dyp, wflip, np.zeros(w.shape[1], x.dtype))
        return dx, dw, db
    return _conv2d_backward_np(x, w, dy, pad)
