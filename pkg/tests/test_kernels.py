"""Backend equivalence and an independent convolution oracle.

scipy.signal.correlate2d serves as the reference implementation: a stride-1
zero-padded convolution in NCHW layout is a per-(batch, filter) sum of 2D
cross-correlations over input channels.
"""

import numpy as np
import pytest
from scipy import signal

from depthdet import kernels


def conv2d_oracle(x, w, b, pad):
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh, ow = h + 2 * pad - kh + 1, wd + 2 * pad - kw + 1
    y = np.zeros((n, f, oh, ow))
    for i in range(n):
        for j in range(f):
            acc = np.zeros((oh, ow))
            for ci in range(c):
                acc += signal.correlate2d(xp[i, ci], w[j, ci], mode="valid")
            y[i, j] = acc + b[j]
    return y


@pytest.fixture(params=["numpy", "numba"])
def backend(request):
    old = kernels.get_backend()
    kernels.set_backend(request.param)
    yield request.param
    kernels.set_backend(old)


@pytest.mark.parametrize("pad,kh", [(1, 3), (0, 1), (0, 3), (2, 5)])
def test_conv2d_matches_scipy_oracle(backend, pad, kh):
    rng = np.random.default_rng(7)
    x = rng.standard_normal((2, 3, 9, 11))
    w = rng.standard_normal((4, 3, kh, kh))
    b = rng.standard_normal(4)
    got = kernels.conv2d(x, w, b, pad=pad)
    want = conv2d_oracle(x, w, b, pad)
    np.testing.assert_allclose(got, want, rtol=1e-12, atol=1e-12)


def test_conv2d_backward_matches_finite_differences(backend):
    rng = np.random.default_rng(11)
    x = rng.standard_normal((1, 2, 6, 7))
    w = rng.standard_normal((3, 2, 3, 3))
    b = rng.standard_normal(3)
    dy = rng.standard_normal((1, 3, 6, 7))

    dx, dw, db = kernels.conv2d_backward(x, w, dy, pad=1)

    def loss(x_, w_, b_):
        return float((kernels.conv2d(x_, w_, b_, pad=1) * dy).sum())

    h = 1e-6
    for arr, grad, name in ((x, dx, "dx"), (w, dw, "dw"), (b, db, "db")):
        flat = arr.reshape(-1)
        for idx in rng.choice(flat.size, size=min(8, flat.size), replace=False):
            orig = flat[idx]
            flat[idx] = orig + h
            lp = loss(x, w, b)
            flat[idx] = orig - h
            lm = loss(x, w, b)
            flat[idx] = orig
            fd = (lp - lm) / (2 * h)
            assert abs(fd - grad.reshape(-1)[idx]) < 1e-6, name


def test_backends_agree():
    rng = np.random.default_rng(3)
    x = rng.standard_normal((2, 4, 10, 12))
    w = rng.standard_normal((5, 4, 3, 3))
    b = rng.standard_normal(5)
    dy = rng.standard_normal((2, 5, 10, 12))

    kernels.set_backend("numpy")
    y1 = kernels.conv2d(x, w, b, pad=1)
    g1 = kernels.conv2d_backward(x, w, dy, pad=1)
    kernels.set_backend("numba")
    y2 = kernels.conv2d(x, w, b, pad=1)
    g2 = kernels.conv2d_backward(x, w, dy, pad=1)

    np.testing.assert_allclose(y1, y2, rtol=1e-12, atol=1e-12)
    for a, b_ in zip(g1, g2):
        np.testing.assert_allclose(a, b_, rtol=1e-12, atol=1e-12)


def test_unknown_backend_rejected():
    with pytest.raises(ValueError):
        kernels.set_backend("cuda")
