"""Shared fixtures and independent reference implementations (oracles).

The oracles here are deliberately naive (nested loops, direct formula
transcriptions) and never share code with the package under test.
"""

import numpy as np
import pytest


def naive_conv2d(x, kernel, bias, stride, padding):
    """Direct 6-nested-loop cross-correlation, independent of the package."""
    n, c_in, h, w = x.shape
    c_out, _, kh, kw = kernel.shape
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    h_out = (h + 2 * padding - kh) // stride + 1
    w_out = (w + 2 * padding - kw) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for b in range(n):
        for o in range(c_out):
            for y in range(h_out):
                for xx in range(w_out):
                    acc = 0.0
                    for c in range(c_in):
                        for i in range(kh):
                            for j in range(kw):
                                acc += kernel[o, c, i, j] * xp[b, c, y * stride + i,
                                                               xx * stride + j]
                    out[b, o, y, xx] = acc + bias[0, o, 0, 0]
    return out


def naive_transposed_conv2d(x, kernel, bias, stride, padding):
    """Zero-stuffing oracle: dilate the input, then correlate with the
    channel-swapped, spatially flipped kernel at stride 1."""
    n, c_in, h, w = x.shape
    _, c_out, kh, kw = kernel.shape
    hz, wz = (h - 1) * stride + 1, (w - 1) * stride + 1
    xz = np.zeros((n, c_in, hz, wz), dtype=np.float64)
    xz[:, :, ::stride, ::stride] = x
    k_conv = kernel.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1]
    return naive_conv2d(xz, k_conv, bias, 1, kh - 1 - padding)


def max_rel_err(a, b, floor=1e-6):
    """Largest elementwise relative error with a small denominator floor."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))
    return float((np.abs(a - b) / denom).max())


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
