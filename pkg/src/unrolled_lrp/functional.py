"""Batched layer kernels (N, C, H, W) with their hand-written adjoints.

Convolution is cross-correlation.  ``conv2d_grad_input`` is the adjoint computed
by scatter-adding every kernel tap; it deliberately does not reuse the
flipped-kernel correlation that the unrolled decoder is built from, so the two
stay independent routes to the same numbers.
"""
from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv_out_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def _windows(x: np.ndarray, kh: int, kw: int, stride: int, pad: int) -> np.ndarray:
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))
    if stride > 1:
        win = win[:, :, ::stride, ::stride]
    return win  # N, C, Ho, Wo, kh, kw


def conv2d(x, w, b=None, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, c, h, wd = x.shape
    o, ci, kh, kw = w.shape
    if c != ci:
        raise ValueError(f"conv2d: input has {c} channels, kernel expects {ci}")
    if h + 2 * pad < kh or wd + 2 * pad < kw:
        raise ValueError("conv2d: kernel larger than padded input")
    y = np.einsum("nchwij,ocij->nohw", _windows(x, kh, kw, stride, pad), w, optimize=True)
    if b is not None:
        y = y + b[None, :, None, None]
    return y


def conv2d_grad_input(gy, w, x_shape, stride: int = 1, pad: int = 0) -> np.ndarray:
    n, c, h, wd = x_shape
    o, _, kh, kw = w.shape
    _, _, ho, wo = gy.shape
    gxp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    for i in range(kh):
        for j in range(kw):
            contrib = np.einsum("nohw,oc->nchw", gy, w[:, :, i, j], optimize=True)
            gxp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride] += contrib
    if pad:
        return gxp[:, :, pad:pad + h, pad:pad + wd].copy()
    return gxp


def conv2d_grad_weight(x, gy, w_shape, stride: int = 1, pad: int = 0) -> np.ndarray:
    _, _, kh, kw = w_shape
    return np.einsum("nchwij,nohw->ocij", _windows(x, kh, kw, stride, pad), gy, optimize=True)


def maxpool2d(x, kernel: int = 2, stride: int = 2):
    """Window maxima and flat argmax switches (first occurrence wins ties).

    Switches index the flattened ``H * W`` plane of the input channel.
    """
    n, c, h, w = x.shape
    if h < kernel or w < kernel:
        raise ValueError("maxpool2d: input smaller than window")
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride]
    ho, wo = win.shape[2], win.shape[3]
    flat = win.reshape(n, c, ho, wo, kernel * kernel)
    arg = np.argmax(flat, axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    di, dj = np.divmod(arg, kernel)
    rows = np.arange(ho)[:, None] * stride + di
    cols = np.arange(wo)[None, :] * stride + dj
    return y, rows * w + cols


def unpool2d(y, switches, out_shape) -> np.ndarray:
    """Scatter each pooled value to its switch position (sums on collisions)."""
    n, c, h, w = out_shape
    if switches.shape != y.shape:
        raise ValueError("unpool2d: switches do not match pooled tensor")
    if switches.size and (switches.min() < 0 or switches.max() >= h * w):
        raise IndexError("unpool2d: switch index outside the input plane")
    out = np.zeros((n * c, h * w))
    idx = switches.reshape(n * c, -1)
    vals = y.reshape(n * c, -1)
    rows = np.repeat(np.arange(n * c), idx.shape[1])
    np.add.at(out, (rows, idx.ravel()), vals.ravel())
    return out.reshape(n, c, h, w)


def upsample_nearest(x, factor: int) -> np.ndarray:
    return x.repeat(factor, axis=2).repeat(factor, axis=3)


def upsample_nearest_grad(gy, factor: int) -> np.ndarray:
    n, c, h, w = gy.shape
    return gy.reshape(n, c, h // factor, factor, w // factor, factor).sum(axis=(3, 5))


def dilate(x, stride: int) -> np.ndarray:
    """Insert ``stride - 1`` zeros between spatial samples."""
    if stride == 1:
        return x
    n, c, h, w = x.shape
    out = np.zeros((n, c, (h - 1) * stride + 1, (w - 1) * stride + 1))
    out[:, :, ::stride, ::stride] = x
    return out
