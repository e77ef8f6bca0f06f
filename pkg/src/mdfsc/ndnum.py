"""Small deterministic numeric kernel for training the autoencoder.

Tensors are plain ``numpy`` arrays in NCHW layout.  Activations default to
float32; every op preserves the dtype of its input so the same code runs in
float64 for gradient checks.

Each differentiable op comes as a pair: ``op(...)`` computes the forward
value and ``op_backward(grad_out, ...)`` returns the input gradient,
accumulating parameter gradients into the :class:`Param` objects it was
given.  There is no autograd graph; the network schedules its own backward.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _backend
from .errors import ContractError

DTYPE = np.float32


@dataclass(eq=False)
class Param:
    """A trainable tensor with its gradient and Adam moment buffers."""

    value: np.ndarray
    grad: np.ndarray = field(init=False)
    adam_m: np.ndarray = field(init=False)
    adam_v: np.ndarray = field(init=False)
    step_count: int = 0

    def __post_init__(self):
        self.value = np.ascontiguousarray(self.value)
        self.grad = np.zeros_like(self.value)
        self.adam_m = np.zeros_like(self.value)
        self.adam_v = np.zeros_like(self.value)

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad.fill(0)


def _check_rank4(x, name="input"):
    if x.ndim != 4:
        raise ContractError(f"{name} must be rank-4 (n, c, h, w), got shape {x.shape}")


# --------------------------------------------------------------------------
# convolution (3x3, stride 1, padding 1)


def _im2col_numpy(x):
    """(n, c, h, w) -> (n, c*9, h*w) columns; row index is c*9 + kh*3 + kw."""
    n, c, h, w = x.shape
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    cols = np.stack([xp[:, :, kh:kh + h, kw:kw + w] for kh in range(3) for kw in range(3)], axis=2)
    return cols.reshape(n, c * 9, h * w)


def _col2im_numpy(dcols, shape):
    n, c, h, w = shape
    dcols = dcols.reshape(n, c, 3, 3, h, w)
    dxp = np.zeros((n, c, h + 2, w + 2), dtype=dcols.dtype)
    for kh in range(3):
        for kw in range(3):
            dxp[:, :, kh:kh + h, kw:kw + w] += dcols[:, :, kh, kw]
    return np.ascontiguousarray(dxp[:, :, 1:-1, 1:-1])


if _backend.BACKEND == "cython":
    from ._conv_ext import col2im as _col2im, im2col as _im2col
else:
    _im2col, _col2im = _im2col_numpy, _col2im_numpy


def _check_conv(x, weight, bias):
    _check_rank4(x)
    wt = weight.value
    if wt.ndim != 4 or wt.shape[2:] != (3, 3):
        raise ContractError(f"conv weight must be (out_c, in_c, 3, 3), got {wt.shape}")
    if x.shape[1] != wt.shape[1]:
        raise ContractError(
            f"conv input has {x.shape[1]} channels, weight expects {wt.shape[1]}"
        )
    if bias.value.shape != (wt.shape[0],):
        raise ContractError(f"conv bias must be ({wt.shape[0]},), got {bias.value.shape}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ContractError(f"conv input has empty spatial dims {x.shape}")


def conv2d(x: np.ndarray, weight: Param, bias: Param, return_cols: bool = False):
    """3x3 convolution with zero padding 1; output keeps the spatial size.

    With ``return_cols`` the im2col buffer is returned too, so a later
    :func:`conv2d_backward` can skip rebuilding it.
    """
    _check_conv(x, weight, bias)
    n, _, h, w = x.shape
    out_c = weight.value.shape[0]
    cols = _im2col(x)
    y = np.matmul(weight.value.reshape(out_c, -1), cols)
    y += bias.value[:, None]
    y = y.reshape(n, out_c, h, w)
    return (y, cols) if return_cols else y


def conv2d_backward(grad_y: np.ndarray, x: np.ndarray, weight: Param, bias: Param,
                    cols: np.ndarray | None = None) -> np.ndarray:
    n, c, h, w = x.shape
    out_c = weight.value.shape[0]
    gy = grad_y.reshape(n, out_c, h * w)
    if cols is None:
        cols = _im2col(x)
    gw = np.zeros((out_c, c * 9), dtype=weight.grad.dtype)
    for i in range(n):
        gw += gy[i] @ cols[i].T
    weight.grad += gw.reshape(weight.value.shape)
    bias.grad += gy.sum(axis=(0, 2))
    dcols = np.matmul(weight.value.reshape(out_c, -1).T, gy)
    return _col2im(dcols, x.shape)


# --------------------------------------------------------------------------
# pooling and resampling


def maxpool2(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pool, stride 2.

    Returns the pooled tensor and, per output cell, the winning position in
    its window (0..3, row-major).  Ties go to the first position.
    """
    _check_rank4(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ContractError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    win = win.reshape(n, c, h // 2, w // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx.astype(np.int8)


def maxpool2_values(x: np.ndarray) -> np.ndarray:
    """Forward-only 2x2 max pool (no argmax bookkeeping)."""
    _check_rank4(x)
    if x.shape[2] % 2 or x.shape[3] % 2:
        raise ContractError(f"maxpool2 needs even spatial dims, got {x.shape[2]}x{x.shape[3]}")
    return np.maximum(np.maximum(x[:, :, 0::2, 0::2], x[:, :, 0::2, 1::2]),
                      np.maximum(x[:, :, 1::2, 0::2], x[:, :, 1::2, 1::2]))


def maxpool2_backward(grad_y: np.ndarray, argmax: np.ndarray) -> np.ndarray:
    n, c, h2, w2 = grad_y.shape
    onehot = argmax[..., None] == np.arange(4, dtype=np.int8)
    g = np.where(onehot, grad_y[..., None], 0).astype(grad_y.dtype)
    g = g.reshape(n, c, h2, w2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(g.reshape(n, c, 2 * h2, 2 * w2))


def downscale(x: np.ndarray, factor: int) -> np.ndarray:
    """Area-average downscaling by an integer factor (block mean)."""
    _check_rank4(x)
    if factor not in (2, 4):
        raise ContractError(f"downscale factor must be 2 or 4, got {factor}")
    n, c, h, w = x.shape
    if h % factor or w % factor:
        raise ContractError(f"spatial dims {h}x{w} not divisible by {factor}")
    blocks = x.reshape(n, c, h // factor, factor, w // factor, factor)
    return blocks.mean(axis=(3, 5), dtype=x.dtype)


def downscale_backward(grad_y: np.ndarray, factor: int) -> np.ndarray:
    g = grad_y / (factor * factor)
    return np.repeat(np.repeat(g, factor, axis=2), factor, axis=3)


def upsample2(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour 2x upsampling."""
    _check_rank4(x)
    return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)


def upsample2_backward(grad_y: np.ndarray) -> np.ndarray:
    n, c, h, w = grad_y.shape
    return grad_y.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5))


# --------------------------------------------------------------------------
# pointwise / dense


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(grad_y: np.ndarray, x: np.ndarray) -> np.ndarray:
    # subgradient 0 at exactly 0
    return np.where(x > 0, grad_y, 0).astype(grad_y.dtype)


def linear(x: np.ndarray, weight: Param, bias: Param) -> np.ndarray:
    """``x @ weight.T + bias`` for a rank-2 batch ``x`` of shape (n, d_in)."""
    if x.ndim != 2:
        raise ContractError(f"linear input must be rank-2, got shape {x.shape}")
    d_out, d_in = weight.value.shape
    if x.shape[1] != d_in:
        raise ContractError(f"linear input has {x.shape[1]} columns, weight expects {d_in}")
    if bias.value.shape != (d_out,):
        raise ContractError(f"linear bias must be ({d_out},), got {bias.value.shape}")
    return x @ weight.value.T + bias.value


def linear_backward(grad_y: np.ndarray, x: np.ndarray, weight: Param, bias: Param) -> np.ndarray:
    weight.grad += grad_y.T @ x
    bias.grad += grad_y.sum(axis=0)
    return grad_y @ weight.value


# --------------------------------------------------------------------------
# loss and optimizer


def l2_loss(pred: np.ndarray, target: np.ndarray) -> float:
    """Mean squared elementwise difference."""
    if pred.shape != target.shape:
        raise ContractError(f"l2_loss shape mismatch: {pred.shape} vs {target.shape}")
    diff = pred.astype(np.float64) - target
    return float(np.mean(diff * diff))


def l2_loss_backward(pred: np.ndarray, target: np.ndarray) -> np.ndarray:
    return (2.0 / pred.size) * (pred - target)


def adam_step(
    params: Iterable[Param],
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place Adam update with bias correction; gradients are zeroed afterwards."""
    for p in params:
        p.step_count += 1
        t = p.step_count
        g = p.grad
        p.adam_m *= beta1
        p.adam_m += (1 - beta1) * g
        p.adam_v *= beta2
        p.adam_v += (1 - beta2) * (g * g)
        m_hat = p.adam_m / (1 - beta1 ** t)
        v_hat = p.adam_v / (1 - beta2 ** t)
        p.value -= (lr * m_hat / (np.sqrt(v_hat) + eps)).astype(p.value.dtype)
        p.zero_grad()
