"""Differentiable layer primitives with hand-derived adjoints.

Every ``*_forward`` returns the output together with whatever the matching
``*_backward`` needs; nothing here tracks a graph. Feature maps are NCHW.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .tensor import ShapeError

BN_EPS = 1e-5
BN_MOMENTUM = 0.1


@dataclass
class ConvParams:
    weight: np.ndarray  # (out_ch, in_ch, kh, kw)
    bias: Optional[np.ndarray] = None
    stride: int = 1
    padding: int = 0

    @property
    def out_channels(self) -> int:
        return self.weight.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weight.shape[1]

    @property
    def kernel(self) -> tuple[int, int]:
        return self.weight.shape[2], self.weight.shape[3]

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        kh, kw = self.kernel
        return (h + 2 * self.padding - kh) // self.stride + 1, (w + 2 * self.padding - kw) // self.stride + 1

    def named_parameters(self, prefix: str):
        yield f"{prefix}.weight", self.weight
        if self.bias is not None:
            yield f"{prefix}.bias", self.bias


@dataclass
class BatchNormParams:
    scale: np.ndarray
    shift: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS

    @classmethod
    def identity(cls, channels: int, dtype=np.float64) -> "BatchNormParams":
        return cls(
            scale=np.ones(channels, dtype),
            shift=np.zeros(channels, dtype),
            running_mean=np.zeros(channels, dtype),
            running_var=np.ones(channels, dtype),
        )

    def named_parameters(self, prefix: str):
        yield f"{prefix}.scale", self.scale
        yield f"{prefix}.shift", self.shift

    def named_buffers(self, prefix: str):
        yield f"{prefix}.running_mean", self.running_mean
        yield f"{prefix}.running_var", self.running_var


# ----------------------------------------------------------------------------
# convolution


def _check_conv(x: np.ndarray, p: ConvParams) -> tuple[int, int]:
    if x.ndim != 4:
        raise ShapeError(f"conv2d input must be 4-D NCHW, got shape {x.shape}")
    if x.shape[1] != p.in_channels:
        raise ShapeError(
            f"conv2d channel mismatch: input shape {x.shape} vs weight shape {p.weight.shape}"
        )
    oh, ow = p.output_hw(x.shape[2], x.shape[3])
    if oh < 1 or ow < 1:
        raise ShapeError(
            f"conv2d input shape {x.shape} too small for weight shape {p.weight.shape} "
            f"with padding {p.padding}"
        )
    return oh, ow


def _is_pointwise(p: ConvParams) -> bool:
    return p.kernel == (1, 1) and p.stride == 1 and p.padding == 0


def _windows(p: ConvParams, i: int, j: int, oh: int, ow: int):
    s = p.stride
    return slice(i, i + (oh - 1) * s + 1, s), slice(j, j + (ow - 1) * s + 1, s)


def _im2col(x: np.ndarray, p: ConvParams, oh: int, ow: int) -> np.ndarray:
    """Receptive fields as a ``(B*oh*ow, kh*kw*C)`` matrix, channels fastest."""
    b, c = x.shape[:2]
    kh, kw = p.kernel
    pad = p.padding
    xt = np.zeros((b, x.shape[2] + 2 * pad, x.shape[3] + 2 * pad, c), dtype=x.dtype)
    xt[:, pad : pad + x.shape[2], pad : pad + x.shape[3]] = x.transpose(0, 2, 3, 1)
    cols = np.empty((b, oh, ow, kh, kw, c), dtype=x.dtype)
    for i in range(kh):
        for j in range(kw):
            rows, cs = _windows(p, i, j, oh, ow)
            cols[:, :, :, i, j] = xt[:, rows, cs]
    return cols.reshape(b * oh * ow, kh * kw * c)


def _flat_weight(p: ConvParams) -> np.ndarray:
    return p.weight.transpose(0, 2, 3, 1).reshape(p.out_channels, -1)


def _row_patches(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Stride-1 patches gathered along width only: ``(B, H+2pad, OW, kw*C)``.

    A kernel row ``i`` then reads the contiguous band ``[:, i:i+OH]``, so the
    convolution becomes ``kh`` batched matmuls without a full im2col copy.
    """
    b, c, h, w = x.shape
    kw = p.kernel[1]
    pad = p.padding
    ow = w + 2 * pad - kw + 1
    xt = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
    xt[:, pad : pad + h, pad : pad + w] = x.transpose(0, 2, 3, 1)
    rows = np.empty((b, h + 2 * pad, ow, kw, c), dtype=x.dtype)
    for j in range(kw):
        rows[:, :, :, j] = xt[:, :, j : j + ow]
    return rows.reshape(b, h + 2 * pad, ow, kw * c)


def _row_weight(p: ConvParams) -> np.ndarray:
    kh, kw = p.kernel
    return p.weight.transpose(2, 3, 1, 0).reshape(kh, kw * p.in_channels, p.out_channels)


def conv2d_forward(x: np.ndarray, p: ConvParams) -> np.ndarray:
    oh, ow = _check_conv(x, p)
    b = x.shape[0]
    if _is_pointwise(p):
        w2 = p.weight.reshape(p.out_channels, p.in_channels)
        y = np.matmul(w2, x.reshape(b, p.in_channels, -1)).reshape(b, p.out_channels, oh, ow)
    elif p.stride == 1:
        rows, wr = _row_patches(x, p), _row_weight(p)
        y = np.zeros((b, oh * ow, p.out_channels), dtype=x.dtype)
        for i in range(p.kernel[0]):
            y += np.matmul(rows[:, i : i + oh].reshape(b, oh * ow, -1), wr[i])
        y = np.ascontiguousarray(y.reshape(b, oh, ow, -1).transpose(0, 3, 1, 2))
    else:
        y = _im2col(x, p, oh, ow) @ _flat_weight(p).T
        y = np.ascontiguousarray(y.reshape(b, oh, ow, p.out_channels).transpose(0, 3, 1, 2))
    if p.bias is not None:
        y += p.bias[None, :, None, None]
    return y


def conv2d_backward(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Return ``(grad_input, {"weight": ..., ["bias": ...]})``."""
    oh, ow = _check_conv(x, p)
    expected = (x.shape[0], p.out_channels, oh, ow)
    if grad_out.shape != expected:
        raise ShapeError(f"conv2d grad_out shape {grad_out.shape} != output shape {expected}")
    b, c, h, w = x.shape
    kh, kw = p.kernel
    pad = p.padding
    grads = {}
    if _is_pointwise(p):
        g2 = grad_out.reshape(b, p.out_channels, -1)
        x2 = x.reshape(b, p.in_channels, -1)
        grads["weight"] = np.matmul(g2, x2.transpose(0, 2, 1)).sum(axis=0).reshape(p.weight.shape)
        w2 = p.weight.reshape(p.out_channels, p.in_channels)
        gx = np.matmul(w2.T, g2).reshape(x.shape)
    elif p.stride == 1:
        rows, wr = _row_patches(x, p), _row_weight(p)
        g3 = np.ascontiguousarray(grad_out.transpose(0, 2, 3, 1)).reshape(b, oh * ow, -1)
        gw = np.empty_like(wr)
        grows = np.zeros_like(rows)
        for i in range(kh):
            band = rows[:, i : i + oh].reshape(b, oh * ow, -1)
            gw[i] = np.matmul(band.transpose(0, 2, 1), g3).sum(axis=0)
            grows[:, i : i + oh] += np.matmul(g3, wr[i].T).reshape(b, oh, ow, -1)
        grads["weight"] = np.ascontiguousarray(gw.reshape(kh, kw, c, -1).transpose(3, 2, 0, 1))
        grows = grows.reshape(b, h + 2 * pad, ow, kw, c)
        gxt = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        for j in range(kw):
            gxt[:, :, j : j + ow] += grows[:, :, :, j]
        gx = np.ascontiguousarray(gxt[:, pad : pad + h, pad : pad + w].transpose(0, 3, 1, 2))
    else:
        g2 = grad_out.transpose(0, 2, 3, 1).reshape(-1, p.out_channels)
        gw = g2.T @ _im2col(x, p, oh, ow)
        grads["weight"] = np.ascontiguousarray(gw.reshape(p.out_channels, kh, kw, c).transpose(0, 3, 1, 2))
        gcols = (g2 @ _flat_weight(p)).reshape(b, oh, ow, kh, kw, c)
        gxt = np.zeros((b, h + 2 * pad, w + 2 * pad, c), dtype=x.dtype)
        for i in range(kh):
            for j in range(kw):
                r, cs = _windows(p, i, j, oh, ow)
                gxt[:, r, cs] += gcols[:, :, :, i, j]
        gx = np.ascontiguousarray(gxt[:, pad : pad + h, pad : pad + w].transpose(0, 3, 1, 2))
    if p.bias is not None:
        grads["bias"] = grad_out.sum(axis=(0, 2, 3))
    return gx, grads


# ----------------------------------------------------------------------------
# batch normalization


def batchnorm_forward(x: np.ndarray, p: BatchNormParams, training: bool, update_stats: bool = True):
    """Per-channel normalization over (batch, rows, cols).

    In training mode the batch statistics are used and, when ``update_stats``
    is set, folded into the running estimates. Returns ``(y, cache)``.
    """
    if x.ndim != 4 or x.shape[1] != p.scale.shape[0]:
        raise ShapeError(f"batchnorm input shape {x.shape} vs {p.scale.shape[0]} channels")
    if x.shape[0] == 0:
        raise ShapeError("batchnorm on an empty batch")
    if training:
        count = x.shape[0] * x.shape[2] * x.shape[3]
        mean = x.mean(axis=(0, 2, 3))
        centered = x - mean[None, :, None, None]
        var = (centered * centered).mean(axis=(0, 2, 3))
        inv_std = 1.0 / np.sqrt(var + p.eps)
        xhat = centered * inv_std[None, :, None, None]
        if update_stats:
            unbiased = var * count / (count - 1) if count > 1 else var
            p.running_mean *= 1.0 - p.momentum
            p.running_mean += p.momentum * mean
            p.running_var *= 1.0 - p.momentum
            p.running_var += p.momentum * unbiased
        cache = (True, xhat, inv_std)
    else:
        inv_std = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean[None, :, None, None]) * inv_std[None, :, None, None]
        cache = (False, xhat, inv_std)
    y = xhat * p.scale[None, :, None, None] + p.shift[None, :, None, None]
    return y, cache


def batchnorm_backward(cache, p: BatchNormParams, grad_out: np.ndarray):
    training, xhat, inv_std = cache
    grads = {
        "scale": (grad_out * xhat).sum(axis=(0, 2, 3)),
        "shift": grad_out.sum(axis=(0, 2, 3)),
    }
    gxhat = grad_out * p.scale[None, :, None, None]
    if not training:
        return gxhat * inv_std[None, :, None, None], grads
    m = xhat.shape[0] * xhat.shape[2] * xhat.shape[3]
    s1 = gxhat.sum(axis=(0, 2, 3))
    s2 = (gxhat * xhat).sum(axis=(0, 2, 3))
    gx = (gxhat - (s1[None, :, None, None] + xhat * s2[None, :, None, None]) / m) * inv_std[None, :, None, None]
    return gx, grads


# ----------------------------------------------------------------------------
# pointwise and pooling


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return grad_out * (x > 0)


def avgpool2x2_forward(x: np.ndarray) -> np.ndarray:
    b, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"avgpool2x2 needs even spatial dims, got {x.shape}")
    return x.reshape(b, c, h // 2, 2, w // 2, 2).mean(axis=(3, 5))


def avgpool2x2_backward(grad_out: np.ndarray) -> np.ndarray:
    return upsample2x(grad_out) * 0.25


def upsample2x(x: np.ndarray) -> np.ndarray:
    """Nearest-neighbour upscale by replication."""
    return x.repeat(2, axis=2).repeat(2, axis=3)


def maxpool_forward(x: np.ndarray, kernel: int = 3, stride: int = 2, padding: int = 1):
    b, c, h, w = x.shape
    oh = (h + 2 * padding - kernel) // stride + 1
    ow = (w + 2 * padding - kernel) // stride + 1
    if oh < 1 or ow < 1:
        raise ShapeError(f"maxpool input {x.shape} too small")
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)), constant_values=-np.inf)
    win = sliding_window_view(xp, (kernel, kernel), axis=(2, 3))[
        :, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride
    ]
    flat = win.reshape(b, c, oh, ow, kernel * kernel)
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    return y, (x.shape, arg, kernel, stride, padding)


def maxpool_backward(cache, grad_out: np.ndarray) -> np.ndarray:
    shape, arg, kernel, stride, padding = cache
    b, c, h, w = shape
    oh, ow = arg.shape[2:]
    gxp = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=grad_out.dtype)
    di, dj = np.divmod(arg, kernel)
    rows = np.arange(oh)[None, None, :, None] * stride + di
    cols = np.arange(ow)[None, None, None, :] * stride + dj
    bi = np.arange(b)[:, None, None, None]
    ci = np.arange(c)[None, :, None, None]
    np.add.at(gxp, (bi, ci, rows, cols), grad_out)
    return gxp[:, :, padding : padding + h, padding : padding + w]


def global_avgpool_forward(x: np.ndarray) -> np.ndarray:
    return x.mean(axis=(2, 3))


def global_avgpool_backward(grad_out: np.ndarray, shape: tuple) -> np.ndarray:
    b, c, h, w = shape
    return np.broadcast_to(grad_out[:, :, None, None] / (h * w), shape).copy()


# ----------------------------------------------------------------------------
# fully connected head and loss


def linear_forward(x: np.ndarray, weight: np.ndarray, bias: Optional[np.ndarray]) -> np.ndarray:
    if x.ndim != 2 or x.shape[1] != weight.shape[1]:
        raise ShapeError(f"linear input shape {x.shape} vs weight shape {weight.shape}")
    y = x @ weight.T
    if bias is not None:
        y += bias
    return y


def linear_backward(x: np.ndarray, weight: np.ndarray, grad_out: np.ndarray, has_bias: bool = True):
    grads = {"weight": grad_out.T @ x}
    if has_bias:
        grads["bias"] = grad_out.sum(axis=0)
    return grad_out @ weight, grads


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy over the batch and its gradient w.r.t. ``logits``."""
    if logits.ndim != 2:
        raise ShapeError(f"logits must be 2-D, got {logits.shape}")
    b, k = logits.shape
    if b == 0:
        raise ShapeError("softmax_cross_entropy on an empty batch")
    labels = np.asarray(labels)
    if labels.shape != (b,):
        raise ShapeError(f"labels shape {labels.shape} vs batch {b}")
    if labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"label out of range [0, {k}): min {labels.min()}, max {labels.max()}")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1))
    logp = shifted - log_z[:, None]
    rows = np.arange(b)
    loss = -logp[rows, labels].mean()
    grad = np.exp(logp)
    grad[rows, labels] -= 1.0
    return float(loss), grad / b
