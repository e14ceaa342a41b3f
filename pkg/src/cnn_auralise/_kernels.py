"""Compiled inner loops for the deconvolution fast path."""

import numba
import numpy as np


@numba.njit(cache=True, nogil=True)
def _scatter_multi(g, offsets, weights, out):
    n_batch, h, w, n_ch = g.shape
    n_in = weights.shape[3]
    for b in range(n_batch):
        for i in range(h):
            for j in range(w):
                for o in range(n_ch):
                    v = g[b, i, j, o]
                    if v <= 0:
                        continue
                    k = offsets[i, j, o]
                    y = 2 * i + k // 2
                    x = 2 * j + k % 2
                    for ky in range(3):
                        for kx in range(3):
                            for c in range(n_in):
                                out[b, y + ky, x + kx, c] += v * weights[o, ky, kx, c]
    return out


@numba.njit(cache=True, nogil=True)
def _scatter_single(g, offsets, weights, out):
    n_batch, h, w, n_ch = g.shape
    for b in range(n_batch):
        for i in range(h):
            for j in range(w):
                for o in range(n_ch):
                    v = g[b, i, j, o]
                    if v <= 0:
                        continue
                    k = offsets[i, j, o]
                    y = 2 * i + k // 2
                    x = 2 * j + k % 2
                    for ky in range(3):
                        for kx in range(3):
                            out[b, y + ky, x + kx] += v * weights[o, ky, kx]
    return out


def unpool_relu_tconv(g, offsets, weights, out):
    """Fused unpool -> ReLU -> transposed 3x3 convolution, channels-last.

    g        (B, h, w, C)       pooled-level values
    offsets  (h, w, C) int8     switch position 0..3 inside each 2x2 window
    weights  (C, 3, 3, C_in)    conv kernel re-laid as [out][ky][kx][in]
    out      (B, H + 2, W + 2, C_in) zero-initialised, one pixel of padding

    Only positive values are scattered, so the cost scales with the number
    of surviving activations instead of the full unpooled grid.
    """
    if weights.shape[3] == 1:
        _scatter_single(g, offsets, np.ascontiguousarray(weights[..., 0]), out[..., 0])
    else:
        _scatter_multi(g, offsets, weights, out)
    return out


def channels_last_weights(kernel: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(kernel.transpose(0, 2, 3, 1))
