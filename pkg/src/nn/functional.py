"""Forward and backward primitives for every layer type.

Convention: batches are NCHW for feature maps and NF for dense activations.
Convolutions are valid cross-correlations with stride 1; pooling windows are
non-overlapping and drop a trailing odd row/column.
"""

from __future__ import annotations

from typing import Optional, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from src.errors import InvalidArgumentError, ShapeError
from src.tensor import Tensor, matmul


def sigmoid(x: Tensor | float) -> Tensor:
    # clipped so exp never overflows; saturates to 0/1 instead
    z = np.clip(np.asarray(x, dtype=np.float64), -500.0, 500.0)
    return 1.0 / (1.0 + np.exp(-z))


def relu(x: Tensor | float) -> Tensor:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_grad(x: Tensor | float) -> Tensor:
    # derivative at exactly 0 is 0
    return (np.asarray(x, dtype=np.float64) > 0.0).astype(np.float64)


def softmax(logits: Tensor) -> Tensor:
    """Row-wise softmax with max subtraction; a 1-D input is one row."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0:
        raise ShapeError("softmax of an empty vector")
    shifted = z - np.max(z, axis=-1, keepdims=True)
    exps = np.exp(shifted)
    return exps / np.sum(exps, axis=-1, keepdims=True)


def dense_forward(weights: Tensor, bias: Tensor, inputs: Tensor) -> Tensor:
    """z = inputs · Wᵀ + b with W of shape [out, in]."""
    if inputs.ndim != 2 or weights.ndim != 2:
        raise ShapeError(f"dense expects rank-2 inputs and weights, got {inputs.shape} and {weights.shape}")
    if inputs.shape[1] != weights.shape[1]:
        raise ShapeError(f"input width {inputs.shape[1]} != fan-in {weights.shape[1]}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} does not match {weights.shape[0]} units")
    return matmul(inputs, weights.T) + bias


def dense_backward(weights: Tensor, inputs: Tensor, dz: Tensor) -> Tuple[Tensor, Tensor, Tensor]:
    """Returns (d_inputs, d_weights, d_bias)."""
    return dz @ weights, dz.T @ inputs, dz.sum(axis=0)


def _as_batch(x: Tensor) -> Tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[np.newaxis], True
    if x.ndim == 4:
        return x, False
    raise ShapeError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv_forward(kernels: Tensor, bias: Tensor, inputs: Tensor) -> Tensor:
    """Valid cross-correlation, one shared kernel per feature map.

    kernels: [maps, channels, kh, kw]; bias: [maps]; inputs: [C,H,W] or
    [N,C,H,W]. Returns [maps, H-kh+1, W-kw+1] (batched if the input was).
    """
    x, single = _as_batch(inputs)
    maps, channels, kh, kw = kernels.shape
    if x.shape[1] != channels:
        raise ShapeError(f"input has {x.shape[1]} channels, kernels expect {channels}")
    if x.shape[2] < kh or x.shape[3] < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than input {x.shape[2]}x{x.shape[3]}")
    if bias.shape != (maps,):
        raise ShapeError(f"bias shape {bias.shape} does not match {maps} maps")
    # windows: [N, C, OH, OW, kh, kw]
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    out = np.tensordot(windows, kernels, axes=([1, 4, 5], [1, 2, 3]))  # [N, OH, OW, maps]
    out = np.ascontiguousarray(out.transpose(0, 3, 1, 2)) + bias[None, :, None, None]
    return out[0] if single else out


def conv_backward(
    kernels: Tensor,
    inputs: Tensor,
    dout: Tensor,
    input_grad: bool = True,
) -> Tuple[Optional[Tensor], Tensor, Tensor]:
    """Gradients of a valid convolution; returns (d_inputs, d_kernels, d_bias).

    Weight sharing: every spatial position contributes to the same kernel
    gradient. With ``input_grad=False`` (first layer) d_inputs is None.
    """
    x, single = _as_batch(inputs)
    d, _ = _as_batch(dout)
    _, _, kh, kw = kernels.shape
    windows = sliding_window_view(x, (kh, kw), axis=(2, 3))
    d_kernels = np.tensordot(d, windows, axes=([0, 2, 3], [0, 2, 3]))  # [maps, C, kh, kw]
    d_bias = d.sum(axis=(0, 2, 3))
    if not input_grad:
        return None, d_kernels, d_bias
    padded = np.pad(d, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    d_windows = sliding_window_view(padded, (kh, kw), axis=(2, 3))  # [N, maps, H, W, kh, kw]
    flipped = kernels[:, :, ::-1, ::-1]
    dx = np.tensordot(d_windows, flipped, axes=([1, 4, 5], [0, 2, 3]))  # [N, H, W, C]
    dx = np.ascontiguousarray(dx.transpose(0, 3, 1, 2))
    return (dx[0] if single else dx), d_kernels, d_bias


def maxpool_forward(inputs: Tensor, size: int = 2) -> Tuple[Tensor, np.ndarray]:
    """Non-overlapping max pooling.

    Returns the pooled maps and, per output cell, the flat row-major index of
    the winning element inside its window (first maximum wins ties).
    """
    x, single = _as_batch(inputs)
    n, c, h, w = x.shape
    if h < size or w < size:
        raise ShapeError(f"pooling {size}x{size} needs at least {size}x{size} input, got {h}x{w}")
    oh, ow = h // size, w // size
    cropped = x[:, :, : oh * size, : ow * size]
    windows = cropped.reshape(n, c, oh, size, ow, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh, ow, size * size)
    argmax = np.argmax(windows, axis=-1)
    out = np.take_along_axis(windows, argmax[..., None], axis=-1)[..., 0]
    if single:
        return out[0], argmax[0]
    return out, argmax


def maxpool_backward(dout: Tensor, argmax: np.ndarray, input_shape: Tuple[int, ...], size: int = 2) -> Tensor:
    d, single = _as_batch(dout)
    idx = argmax[np.newaxis] if single else argmax
    n, c, oh, ow = d.shape
    windows = np.zeros((n, c, oh, ow, size * size), dtype=np.float64)
    np.put_along_axis(windows, idx[..., None], d[..., None], axis=-1)
    routed = windows.reshape(n, c, oh, ow, size, size).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, oh * size, ow * size)
    h, w = input_shape[-2], input_shape[-1]
    dx = np.zeros((n, c, h, w), dtype=np.float64)
    dx[:, :, : oh * size, : ow * size] = routed
    return dx[0] if single else dx


def dropout_forward(
    inputs: Tensor,
    p: float,
    mode: str,
    rng: np.random.Generator | None = None,
) -> Tuple[Tensor, Tensor]:
    """Inverted dropout.

    Returns (output, mask) where mask is the 0/1 keep indicator. In eval mode
    the output is the input and the mask is all ones.
    """
    if not 0.0 <= p < 1.0:
        raise InvalidArgumentError(f"dropout probability must be in [0, 1), got {p}")
    if mode == "eval":
        return inputs, np.ones_like(inputs)
    if mode != "train":
        raise InvalidArgumentError(f"mode must be 'train' or 'eval', got {mode!r}")
    if rng is None:
        raise InvalidArgumentError("train-mode dropout needs a generator")
    mask = (rng.random(inputs.shape) >= p).astype(np.float64)
    return inputs * mask / (1.0 - p), mask


def dropout_apply(inputs: Tensor, mask: Tensor, p: float) -> Tensor:
    """Re-applies a recorded mask (used for frozen-mask gradient checks)."""
    return inputs * mask / (1.0 - p)


def dropout_backward(dout: Tensor, mask: Tensor, p: float) -> Tensor:
    return dout * mask / (1.0 - p)
