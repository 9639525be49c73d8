"""Numba-compiled gather/scatter loops backing the convolution ops.

The convolutions themselves are GEMMs (BLAS); these kernels only move data
between the (N, C, H, W) activation layout and the column matrix layout the
GEMMs consume. They are compiled per dtype on first use and cached on disk.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def im2col(xp, kh, kw, stride, h_out, w_out, cols):
    """Gather sliding windows of padded input ``xp`` into ``cols``.

    xp:   (N, C, Hp, Wp) padded input.
    cols: (N, C*kh*kw, h_out*w_out), written in full.
    """
    n_batch, n_ch = xp.shape[0], xp.shape[1]
    for n in range(n_batch):
        for c in range(n_ch):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for y in range(h_out):
                        base = y * w_out
                        src_y = y * stride + i
                        for x in range(w_out):
                            cols[n, row, base + x] = xp[n, c, src_y, x * stride + j]


@njit(cache=True)
def col2im(cols, kh, kw, stride, h_out, w_out, xp):
    """Scatter-add ``cols`` back into the padded activation ``xp``.

    Adjoint of :func:`im2col`; ``xp`` must be zero-initialized by the caller.
    """
    n_batch, n_ch = xp.shape[0], xp.shape[1]
    for n in range(n_batch):
        for c in range(n_ch):
            for i in range(kh):
                for j in range(kw):
                    row = (c * kh + i) * kw + j
                    for y in range(h_out):
                        base = y * w_out
                        src_y = y * stride + i
                        for x in range(w_out):
                            xp[n, c, src_y, x * stride + j] += cols[n, row, base + x]


def warmup():
    """Force compilation of both kernels for the two supported dtypes."""
    for dt in (np.float32, np.float64):
        xp = np.zeros((1, 1, 3, 3), dtype=dt)
        cols = np.zeros((1, 4, 4), dtype=dt)
        im2col(xp, 2, 2, 1, 2, 2, cols)
        col2im(cols, 2, 2, 1, 2, 2, xp)
