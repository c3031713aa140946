"""Dense float64 tensor kernels.

Tensors are plain ``numpy.ndarray`` values of dtype float64 in C order.
Everything here is a pure function: inputs are never written to.

Convolution is cross-correlation (no kernel flip) with zero padding,
computed by an im2col-style sliding-window view followed by a single
tensordot contraction.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from piggyback.errors import DimensionError

DEBUG = False


def as_tensor(data, shape=None):
    """Convert ``data`` to a contiguous float64 array, optionally reshaped."""
    t = np.ascontiguousarray(data, dtype=np.float64)
    if shape is not None:
        shape = tuple(int(s) for s in shape)
        if any(s < 1 for s in shape):
            raise DimensionError(f"every extent must be >= 1, got {shape}")
        if int(np.prod(shape)) != t.size:
            raise DimensionError(f"cannot view {t.size} values as shape {shape}")
        t = t.reshape(shape)
    return t


def check_finite(t, where="tensor"):
    if DEBUG and not np.all(np.isfinite(t)):
        raise FloatingPointError(f"non-finite values in {where}")
    return t


def matmul(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return check_finite(a @ b, "matmul")


def conv_output_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def _check_conv(x, k, stride, pad):
    if x.ndim != 4 or k.ndim != 4:
        raise DimensionError(f"conv2d expects 4-d input and kernel, got {x.shape} and {k.shape}")
    if x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d channel mismatch: input {x.shape} vs kernel {k.shape}")
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid stride={stride} / pad={pad}")
    _, _, h, w = x.shape
    kh, kw = k.shape[2:]
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )


def _pad(x, pad):
    if pad == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))


def _windows(xp, kh, kw, stride):
    # (N, C, H', W', kh, kw) view, no copy
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, ::stride, ::stride]


def conv2d_forward(x, k, stride=1, pad=0):
    """Cross-correlate ``x`` (N,C,H,W) with ``k`` (F,C,kh,kw)."""
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    _check_conv(x, k, stride, pad)
    kh, kw = k.shape[2:]
    win = _windows(_pad(x, pad), kh, kw, stride)
    out = np.tensordot(win, k, axes=([1, 4, 5], [1, 2, 3]))  # (N, H', W', F)
    return check_finite(np.ascontiguousarray(out.transpose(0, 3, 1, 2)), "conv2d_forward")


def conv2d_backward(dy, x, k, stride=1, pad=0, need_dx=True):
    """Gradients of ``sum(dy * conv2d_forward(x, k))`` w.r.t. ``x`` and ``k``.

    Returns ``(dx, dk)``; ``dx`` is None when ``need_dx`` is false.
    """
    x = np.asarray(x, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    dy = np.asarray(dy, dtype=np.float64)
    _check_conv(x, k, stride, pad)
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)
    if dy.shape != (n, f, ho, wo):
        raise DimensionError(f"conv2d_backward: dy shape {dy.shape} != output shape {(n, f, ho, wo)}")

    win = _windows(_pad(x, pad), kh, kw, stride)
    dk = np.tensordot(dy, win, axes=([0, 2, 3], [0, 2, 3]))  # (F, C, kh, kw)

    dx = None
    if need_dx:
        cols = np.tensordot(dy, k, axes=([1], [0]))  # (N, H', W', C, kh, kw)
        cols = cols.transpose(0, 3, 1, 2, 4, 5)
        dxp = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
        hs = stride * (ho - 1) + 1
        ws = stride * (wo - 1) + 1
        for i in range(kh):
            for j in range(kw):
                dxp[:, :, i:i + hs:stride, j:j + ws:stride] += cols[:, :, :, :, i, j]
        dx = dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp
        dx = np.ascontiguousarray(dx)
    return dx, dk


def reduce_mean_abs(t):
    t = np.asarray(t, dtype=np.float64)
    if t.size == 0:
        raise DimensionError("reduce_mean_abs of an empty tensor")
    return float(np.mean(np.abs(t)))
