"""Forward/backward layer primitives on dense float arrays.

Tensors are plain ``numpy.ndarray`` objects. The model pipeline keeps them
float32; every primitive preserves the input dtype so the gradient checker
can re-run the same code in float64.

Spatial primitives accept either a single sample ``[C, H, W]`` or a batch
``[N, C, H, W]``. Weight gradients of a batch are summed over samples.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import DimensionError, DomainError

Tensor = np.ndarray


@dataclass
class LayerGrads:
    d_input: Tensor
    d_weights: Optional[Tensor] = None
    d_bias: Optional[Tensor] = None


def _batched(x: Tensor) -> tuple[Tensor, bool]:
    if x.ndim == 3:
        return x[None], True
    if x.ndim == 4:
        return x, False
    raise DimensionError(f"expected [C,H,W] or [N,C,H,W], got shape {x.shape}")


def conv_output_size(size: int, k: int, stride: int, pad: int) -> int:
    span = size + 2 * pad - k
    if span < 0 or span % stride:
        raise DimensionError(
            f"spatial size {size} with kernel {k}, stride {stride}, pad {pad} "
            "does not give an integral output size"
        )
    return span // stride + 1


def _check_conv(x: Tensor, weights: Tensor, stride: int, pad: int) -> tuple[int, int]:
    if weights.ndim != 4:
        raise DimensionError(f"weights must be [C_out,C_in,k,k], got {weights.shape}")
    c_out, c_in, kh, kw = weights.shape
    if kh != kw or kh % 2 == 0:
        raise DimensionError(f"kernel must be square with odd size, got {kh}x{kw} (axes 2,3)")
    if x.shape[1] != c_in:
        raise DimensionError(
            f"input channel axis has {x.shape[1]} channels, weights axis 1 expects {c_in}"
        )
    if stride < 1 or pad < 0:
        raise DimensionError(f"invalid stride {stride} / pad {pad}")
    return (
        conv_output_size(x.shape[2], kh, stride, pad),
        conv_output_size(x.shape[3], kh, stride, pad),
    )


def _windows(x: Tensor, k: int, stride: int, pad: int) -> Tensor:
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    # [N, C_in, H', W', k, k]
    return sliding_window_view(xp, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]


def conv2d_forward(
    input: Tensor, weights: Tensor, bias: Tensor, stride: int = 1, pad: int = 0
) -> Tensor:
    """Cross-correlation plus per-output-channel bias."""
    x, single = _batched(input)
    _check_conv(x, weights, stride, pad)
    if bias.shape != (weights.shape[0],):
        raise DimensionError(f"bias shape {bias.shape} does not match C_out={weights.shape[0]}")
    win = _windows(x, weights.shape[2], stride, pad)
    out = np.tensordot(win, weights, axes=([1, 4, 5], [1, 2, 3]))  # N,H',W',C_out
    out = out.transpose(0, 3, 1, 2) + bias[:, None, None]
    out = np.ascontiguousarray(out, dtype=x.dtype)
    return out[0] if single else out


def conv2d_backward(
    input: Tensor, weights: Tensor, stride: int, pad: int, d_output: Tensor
) -> LayerGrads:
    x, single = _batched(input)
    d_out, _ = _batched(d_output)
    h_out, w_out = _check_conv(x, weights, stride, pad)
    expected = (x.shape[0], weights.shape[0], h_out, w_out)
    if d_out.shape != expected:
        raise DimensionError(f"d_output shape {d_out.shape} != forward output shape {expected}")
    k = weights.shape[2]
    win = _windows(x, k, stride, pad)
    d_w = np.tensordot(d_out, win, axes=([0, 2, 3], [0, 2, 3])).astype(x.dtype)
    d_b = d_out.sum(axis=(0, 2, 3)).astype(x.dtype)

    n, _, h, w = x.shape
    d_xp = np.zeros((n, x.shape[1], h + 2 * pad, w + 2 * pad), dtype=x.dtype)
    for i in range(k):
        for j in range(k):
            # N,H',W',C_in
            contrib = np.tensordot(d_out, weights[:, :, i, j], axes=([1], [0]))
            d_xp[:, :, i:i + stride * h_out:stride, j:j + stride * w_out:stride] += (
                contrib.transpose(0, 3, 1, 2)
            )
    d_x = d_xp[:, :, pad:pad + h, pad:pad + w]
    d_x = np.ascontiguousarray(d_x[0] if single else d_x)
    return LayerGrads(d_input=d_x, d_weights=d_w, d_bias=d_b)


def relu_forward(x: Tensor) -> Tensor:
    return np.maximum(x, 0).astype(x.dtype, copy=False)


def relu_backward(x: Tensor, d_out: Tensor) -> Tensor:
    if x.shape != d_out.shape:
        raise DimensionError(f"relu_backward shapes differ: {x.shape} vs {d_out.shape}")
    return np.where(x > 0, d_out, 0).astype(d_out.dtype, copy=False)


def maxpool2_forward(x: Tensor) -> tuple[Tensor, Tensor]:
    """2x2 stride-2 max pool.

    Returns the pooled tensor and, for each output cell, the row-major flat
    index (``row * W + col``) of the winning input cell within its channel
    plane. Ties go to the first cell in row-major scan order.
    """
    xb, single = _batched(x)
    n, c, h, w = xb.shape
    if h % 2 or w % 2:
        raise DimensionError(f"max-pool needs even spatial dims, got H={h} (axis -2), W={w} (axis -1)")
    cells = xb.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    cells = cells.reshape(n, c, h // 2, w // 2, 4)
    local = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, local[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + local // 2
    cols = 2 * np.arange(w // 2)[None, :] + local % 2
    idx = rows * w + cols
    if single:
        return out[0], idx[0]
    return out, idx


def maxpool2_backward(argmax_indices: Tensor, d_out: Tensor, input_shape: tuple) -> Tensor:
    if argmax_indices.shape != d_out.shape:
        raise DimensionError(
            f"argmax shape {argmax_indices.shape} != d_out shape {d_out.shape}"
        )
    single = len(input_shape) == 3
    shape = (1, *input_shape) if single else tuple(input_shape)
    n, c, h, w = shape
    if d_out.shape[-2:] != (h // 2, w // 2):
        raise DimensionError(f"d_out spatial dims {d_out.shape[-2:]} do not match input {input_shape}")
    d_in = np.zeros((n, c, h * w), dtype=d_out.dtype)
    np.put_along_axis(
        d_in, argmax_indices.reshape(n, c, -1), d_out.reshape(n, c, -1), axis=-1
    )
    d_in = d_in.reshape(shape)
    return d_in[0] if single else d_in


def dense_forward(x: Tensor, W: Tensor, b: Tensor) -> Tensor:
    """``y = W x + b`` with ``W`` stored as [out, in]; ``x`` may be [in] or [N, in]."""
    if W.ndim != 2 or x.shape[-1] != W.shape[1] or b.shape != (W.shape[0],):
        raise DimensionError(
            f"dense shapes incompatible: x {x.shape}, W {W.shape}, b {b.shape}"
        )
    return (x @ W.T + b).astype(x.dtype, copy=False)


def dense_backward(x: Tensor, W: Tensor, d_out: Tensor) -> LayerGrads:
    if d_out.shape[-1] != W.shape[0] or d_out.shape[:-1] != x.shape[:-1]:
        raise DimensionError(f"d_out shape {d_out.shape} incompatible with x {x.shape}, W {W.shape}")
    d_x = (d_out @ W).astype(x.dtype, copy=False)
    if x.ndim == 1:
        d_w = np.outer(d_out, x)
        d_b = d_out.copy()
    else:
        d_w = d_out.T @ x
        d_b = d_out.sum(axis=0)
    return LayerGrads(d_input=d_x, d_weights=d_w.astype(x.dtype), d_bias=d_b.astype(x.dtype))


def softmax(logits: Tensor) -> Tensor:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_xent(logits: Tensor, label) -> tuple[float, Tensor]:
    """Cross-entropy of softmax(logits) against ``label``.

    For a batch ``[N, K]`` with ``N`` labels the loss is the batch mean and
    ``d_logits`` is scaled by ``1/N`` accordingly.
    """
    k = logits.shape[-1]
    labels = np.atleast_1d(np.asarray(label))
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise DomainError(f"label out of range [0, {k}): {label}")
    single = logits.ndim == 1
    z = logits[None] if single else logits
    if labels.shape != (z.shape[0],):
        raise DimensionError(f"{labels.shape[0]} labels for {z.shape[0]} logit rows")
    shifted = z - z.max(axis=-1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=-1))
    rows = np.arange(z.shape[0])
    losses = log_norm - shifted[rows, labels]
    d = softmax(z)
    d[rows, labels] -= 1
    if single:
        return float(losses[0]), d[0].astype(logits.dtype)
    return float(losses.mean()), (d / z.shape[0]).astype(logits.dtype)


def finite_diff_check(
    forward_fn: Callable[[Tensor], float],
    analytic_grad: Tensor,
    point: Tensor,
    step: float = 1e-3,
    indices: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between ``analytic_grad`` and central differences.

    ``forward_fn`` maps an array shaped like ``point`` to a scalar. Relative
    error is ``|a - b| / max(|a|, |b|, 1e-6)``. ``indices`` restricts the check
    to a subset of flat coordinates.
    """
    base = np.array(point, copy=True)
    flat = base.reshape(-1)
    grad = np.asarray(analytic_grad).reshape(-1)
    if grad.size != flat.size:
        raise DimensionError(f"gradient has {grad.size} entries, point has {flat.size}")
    coords = range(flat.size) if indices is None else indices
    worst = 0.0
    for i in coords:
        orig = flat[i]
        flat[i] = orig + step
        f_plus = float(forward_fn(base))
        flat[i] = orig - step
        f_minus = float(forward_fn(base))
        flat[i] = orig
        numeric = (f_plus - f_minus) / (2 * step)
        a = float(grad[i])
        err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-6)
        worst = max(worst, err)
    return worst
