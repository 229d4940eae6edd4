"""Differentiable building blocks shared by the translation model and the vocoder.

All sequence ops are channels-first: a signal is a ``[channels x time]`` tensor.
"""
from typing import Optional

import numpy as np

from numerics.tensor import NEG_INF, Tensor, _result, as_tensor, concat, matmul
from utils.errors import DimensionError, LookupFailure

__all__ = [
    "matmul", "concat", "conv1d", "transposed_conv1d", "layer_norm", "relu", "softmax",
    "log_softmax", "masked_log_softmax", "embedding_lookup", "dropout", "avg_pool1d",
    "l1_loss", "mse_loss", "cross_entropy",
]


def _strided_window(length_out: int, stride: int, offset: int) -> slice:
    return slice(offset, offset + stride * (length_out - 1) + 1, stride)


# ===== CONVOLUTIONS =====

def conv1d(
    x,
    kernel,
    bias=None,
    stride: int = 1,
    padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Cross-correlation of ``x[C_in x T]`` with ``kernel[C_out x C_in x K]``."""
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 3:
        raise DimensionError(f"conv1d expects x[C_in x T] and kernel[C_out x C_in x K], got {x.shape} and {kernel.shape}")
    c_in, length = x.shape
    c_out, kernel_in, width = kernel.shape
    if kernel_in != c_in:
        raise DimensionError(f"conv1d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or dilation < 1:
        raise DimensionError(f"conv1d stride and dilation must be >= 1, got stride={stride} dilation={dilation}")
    span = dilation * (width - 1) + 1
    padded_length = length + 2 * padding
    if span > padded_length:
        raise DimensionError(
            f"conv1d kernel span {span} exceeds padded input length {padded_length} "
            f"(input {x.shape}, kernel {kernel.shape})"
        )
    length_out = (padded_length - span) // stride + 1

    padded = np.pad(x.data, ((0, 0), (padding, padding)))
    # patches[i, t, k] = padded[i, t * stride + k * dilation]
    patches = np.stack(
        [padded[:, _strided_window(length_out, stride, k * dilation)] for k in range(width)], axis=2
    )
    out = np.tensordot(kernel.data, patches, axes=([1, 2], [0, 2]))
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None]
        parents.append(bias)

    def backward(g):
        grad_kernel = np.tensordot(g, patches, axes=([1], [1]))
        grad_patches = np.tensordot(kernel.data, g, axes=([0], [0]))  # [C_in x K x T']
        grad_padded = np.zeros_like(padded)
        for k in range(width):
            grad_padded[:, _strided_window(length_out, stride, k * dilation)] += grad_patches[:, k, :]
        grads = [grad_padded[:, padding:padding + length], grad_kernel]
        if bias is not None:
            grads.append(g.sum(axis=1))
        return grads

    return _result(out, parents, backward, "conv1d")


def transposed_conv1d(
    x,
    kernel,
    bias=None,
    stride: int = 1,
    padding: int = 0,
    output_padding: int = 0,
    dilation: int = 1,
) -> Tensor:
    """Adjoint of :func:`conv1d`; ``kernel`` is laid out ``[C_in x C_out x K]``.

    Output length is ``(T - 1) * stride - 2 * padding + dilation * (K - 1) + 1 + output_padding``.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 2 or kernel.ndim != 3:
        raise DimensionError(
            f"transposed_conv1d expects x[C_in x T] and kernel[C_in x C_out x K], got {x.shape} and {kernel.shape}"
        )
    c_in, length = x.shape
    kernel_in, c_out, width = kernel.shape
    if kernel_in != c_in:
        raise DimensionError(f"transposed_conv1d channel mismatch: input {x.shape} vs kernel {kernel.shape}")
    if stride < 1 or dilation < 1:
        raise DimensionError(f"transposed_conv1d stride and dilation must be >= 1, got stride={stride}")
    full_length = (length - 1) * stride + dilation * (width - 1) + 1 + output_padding
    length_out = full_length - 2 * padding
    if length_out < 1:
        raise DimensionError(
            f"transposed_conv1d padding {padding} consumes the whole output (input {x.shape}, kernel {kernel.shape})"
        )

    # contributions[o, t, k] = sum_i x[i, t] * kernel[i, o, k]
    contributions = np.tensordot(x.data, kernel.data, axes=([0], [0])).transpose(1, 0, 2)
    full = np.zeros((c_out, full_length))
    for k in range(width):
        full[:, _strided_window(length, stride, k * dilation)] += contributions[:, :, k]
    out = full[:, padding:padding + length_out]
    parents = [x, kernel]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[:, None]
        parents.append(bias)

    def backward(g):
        g_full = np.zeros((c_out, full_length))
        g_full[:, padding:padding + length_out] = g
        g_contrib = np.stack(
            [g_full[:, _strided_window(length, stride, k * dilation)] for k in range(width)], axis=2
        )
        grad_x = np.tensordot(kernel.data, g_contrib, axes=([1, 2], [0, 2]))
        grad_kernel = np.tensordot(x.data, g_contrib, axes=([1], [1]))
        grads = [grad_x, grad_kernel]
        if bias is not None:
            grads.append(g.sum(axis=1))
        return grads

    return _result(out, parents, backward, "transposed_conv1d")


def avg_pool1d(x: Tensor, factor: int) -> Tensor:
    """Non-overlapping mean pooling over time of ``x[C x T]`` (tail samples dropped)."""
    if factor == 1:
        return x
    channels, length = x.shape
    frames = length // factor
    if frames < 1:
        raise DimensionError(f"avg_pool1d factor {factor} exceeds input length {length}")
    return x[:, : frames * factor].reshape(channels, frames, factor).mean(axis=2)


# ===== NORMALIZATION AND ACTIVATIONS =====

def layer_norm(x, gain=None, bias=None, eps: float = 0.0) -> Tensor:
    """Normalize over the last axis, then apply per-feature gain and bias.

    With the default ``eps=0`` the output variance is exactly 1; constant rows normalize to 0.
    """
    x = as_tensor(x)
    width = x.shape[-1]
    centered = x.data - x.data.mean(axis=-1, keepdims=True)
    variance = (centered ** 2).mean(axis=-1, keepdims=True) + eps
    inv_std = 1.0 / np.sqrt(np.maximum(variance, np.finfo(np.float64).tiny))
    normed = centered * inv_std
    gain_t = as_tensor(gain) if gain is not None else None
    bias_t = as_tensor(bias) if bias is not None else None
    out = normed
    if gain_t is not None:
        out = out * gain_t.data
    if bias_t is not None:
        out = out + bias_t.data
    parents = [x] + [t for t in (gain_t, bias_t) if t is not None]

    def backward(g):
        g_normed = g * gain_t.data if gain_t is not None else g
        grad_x = inv_std * (
            g_normed
            - g_normed.mean(axis=-1, keepdims=True)
            - normed * (g_normed * normed).mean(axis=-1, keepdims=True)
        )
        grads = [grad_x]
        if gain_t is not None:
            grads.append((g * normed).reshape(-1, width).sum(axis=0))
        if bias_t is not None:
            grads.append(g.reshape(-1, width).sum(axis=0))
        return grads

    return _result(out, parents, backward, "layer_norm")


def relu(x) -> Tensor:
    return as_tensor(x).relu()


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    exp = np.exp(shifted)
    out = exp / exp.sum(axis=axis, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), backward, "softmax")


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), backward, "log_softmax")


def masked_log_softmax(logits, allowed: np.ndarray, axis: int = -1) -> Tensor:
    """Log-probabilities renormalized over ``allowed``; disallowed entries get the sentinel.

    Disallowed logits never enter the normalizer, so their gradient is exactly zero.
    """
    logits = as_tensor(logits)
    return log_softmax(logits.masked_fill(~np.asarray(allowed, dtype=bool), NEG_INF), axis=axis)


def embedding_lookup(table, ids) -> Tensor:
    table = as_tensor(table)
    ids = np.asarray(ids, dtype=np.int64)
    rows = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= rows):
        bad = int(ids.max()) if ids.max() >= rows else int(ids.min())
        raise LookupFailure(f"embedding id {bad} out of range for table with {rows} rows")
    return table[ids]


def dropout(x: Tensor, p: float, rng: Optional[np.random.Generator], training: bool) -> Tensor:
    if not training or p <= 0.0 or rng is None:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep


# ===== LOSSES =====

def l1_loss(prediction: Tensor, target) -> Tensor:
    return (prediction - as_tensor(target)).abs().mean()


def mse_loss(prediction: Tensor, target) -> Tensor:
    return ((prediction - as_tensor(target)) ** 2).mean()


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of integer ``targets`` under ``logits[N x C]``."""
    targets = np.asarray(targets, dtype=np.int64)
    logp = log_softmax(logits, axis=-1)
    return -(logp[np.arange(len(targets)), targets].mean())
