"""Sliding-window plumbing shared by the float and integer conv paths."""

from __future__ import annotations

import numpy as np


def conv_out_size(h, w, kh, kw, stride, pad):
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (w + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise ValueError(f"empty conv output for input {h}x{w}, kernel {kh}x{kw}")
    return ho, wo


def pad2d(x, pad, fill=0):
    if pad == 0:
        return x
    n, c, h, w = x.shape
    out = np.full((n, c, h + 2 * pad, w + 2 * pad), fill, dtype=x.dtype)
    out[:, :, pad : pad + h, pad : pad + w] = x
    return out


def unfold(x, kh, kw, stride, pad, fill=0):
    """(N, C, H, W) -> (N, C, kh, kw, Ho, Wo), copying window slices."""
    n, c, h, w = x.shape
    ho, wo = conv_out_size(h, w, kh, kw, stride, pad)
    xp = pad2d(x, pad, fill)
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride,
                                  j : j + stride * wo : stride]
    return cols


def fold_add(cols, out_shape, kh, kw, stride, pad):
    """Adjoint of :func:`unfold`: scatter-add windows back onto the input."""
    n, c, h, w = out_shape
    ho, wo = cols.shape[-2:]
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            buf[:, :, i : i + stride * ho : stride,
                j : j + stride * wo : stride] += cols[:, :, i, j]
    if pad == 0:
        return buf
    return buf[:, :, pad : pad + h, pad : pad + w]
