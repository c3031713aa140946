"""Real-valued masks, thresholding and masked layer kernels.

A masked layer computes with ``W * m`` where ``m`` is the thresholded copy
of a trainable real-valued mask ``m_r``. The backbone weights ``W`` are
only ever read. Gradients are taken with respect to ``m`` and applied to
``m_r`` unchanged (straight-through): ``dm = (dy x^T) * W``.
"""

from dataclasses import dataclass, field

import numpy as np

from piggyback.errors import ConfigError, DegenerateWeightsError, DimensionError
from piggyback.tensor import conv2d_backward, conv2d_forward, reduce_mean_abs

BINARY = "binary"
TERNARY = "ternary"

DEFAULT_TAU = 5e-3
DEFAULT_TAU_LO = -5e-3


def binarize(m_r, tau):
    if not tau > 0:
        raise ConfigError(f"binarizer threshold must be > 0, got {tau}")
    return (np.asarray(m_r) >= tau).astype(np.float64)


def ternarize(m_r, tau_lo, tau_hi):
    if not tau_lo < tau_hi:
        raise ConfigError(f"ternary thresholds need tau_lo < tau_hi, got {tau_lo} >= {tau_hi}")
    m_r = np.asarray(m_r)
    out = np.zeros(m_r.shape)
    out[m_r >= tau_hi] = 1.0
    out[m_r <= tau_lo] = -1.0
    return out


@dataclass
class MaskState:
    """Trainable real-valued mask of one layer plus its thresholded cache."""

    real: np.ndarray
    tau: float = DEFAULT_TAU
    mode: str = BINARY
    tau_lo: float = DEFAULT_TAU_LO
    binary: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        self.real = np.array(self.real, dtype=np.float64)
        if self.mode not in (BINARY, TERNARY):
            raise ConfigError(f"unknown mask mode {self.mode!r}")
        if not self.tau > 0:
            raise ConfigError(f"binarizer threshold must be > 0, got {self.tau}")
        if self.mode == TERNARY and not self.tau_lo < self.tau:
            raise ConfigError(f"ternary thresholds need tau_lo < tau_hi, got {self.tau_lo}, {self.tau}")
        self.refresh()

    @property
    def shape(self):
        return self.real.shape

    def threshold(self, real=None):
        real = self.real if real is None else real
        if self.mode == TERNARY:
            return ternarize(real, self.tau_lo, self.tau)
        return binarize(real, self.tau)

    def refresh(self):
        self.binary = self.threshold()
        return self.binary

    @classmethod
    def constant(cls, weight_shape, value=1e-2, **kw):
        return cls(np.full(weight_shape, float(value)), **kw)

    @classmethod
    def proportional(cls, weight, scale=1e-2, **kw):
        """``m_r = scale * W / mean(|W|)``."""
        avg = reduce_mean_abs(weight)
        if avg == 0:
            raise DegenerateWeightsError("cannot initialise a mask proportional to all-zero weights")
        return cls(scale * np.asarray(weight, dtype=np.float64) / avg, **kw)


def _check_same(w, m):
    if w.shape != m.shape:
        raise DimensionError(f"mask shape {m.shape} != weight shape {w.shape}")


def masked_linear_forward(x, W, m, bias=None):
    """``y = (W * m) x + bias`` for a single vector ``x`` (m,) or a batch (N, m)."""
    x = np.asarray(x, dtype=np.float64)
    _check_same(W, m)
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or x.ndim not in (1, 2):
        raise DimensionError(f"masked_linear_forward: x {x.shape} vs W {W.shape}")
    y = x @ (W * m).T
    if bias is not None:
        if np.shape(bias) != (W.shape[0],):
            raise DimensionError(f"bias shape {np.shape(bias)} != ({W.shape[0]},)")
        y = y + bias
    return y


def masked_linear_backward(dy, x, W, m):
    """Return ``(dx, dm)`` for ``y = (W * m) x``."""
    dy = np.asarray(dy, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    _check_same(W, m)
    if x.shape[-1] != W.shape[1] or dy.shape[-1] != W.shape[0] or dy.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"masked_linear_backward: dy {dy.shape}, x {x.shape}, W {W.shape}")
    if x.ndim == 1:
        outer = np.outer(dy, x)
    else:
        outer = dy.T @ x
    dm = outer * W
    dx = dy @ (W * m)
    return dx, dm


def masked_conv_forward(x, W, m, stride=1, pad=0, bias=None):
    _check_same(W, m)
    y = conv2d_forward(x, W * m, stride, pad)
    if bias is not None:
        if np.shape(bias) != (W.shape[0],):
            raise DimensionError(f"bias shape {np.shape(bias)} != ({W.shape[0]},)")
        y = y + np.asarray(bias).reshape(1, -1, 1, 1)
    return y


def masked_conv_backward(dy, x, W, m, stride=1, pad=0, need_dx=True):
    """Return ``(dx, dm)``; ``dm`` is the kernel gradient times ``W``."""
    _check_same(W, m)
    dx, dk = conv2d_backward(dy, x, W * m, stride, pad, need_dx=need_dx)
    return dx, dk * W


def scale_mask_gradient(dm, W):
    avg = reduce_mean_abs(W)
    if avg == 0:
        raise DegenerateWeightsError("mean |W| is zero; cannot scale mask gradient")
    return np.asarray(dm, dtype=np.float64) / avg
