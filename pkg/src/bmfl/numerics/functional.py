"""Stateless neural-network functions built on the tensor primitives."""
from __future__ import annotations

import math

import numpy as np

from bmfl.errors import DimensionError, InputError
from bmfl.numerics.tensor import Tensor, as_tensor, log_softmax, matmul, softmax


def softmax_rows(x: Tensor) -> Tensor:
    """Row-wise softmax of a matrix (or the last axis of any tensor)."""
    return softmax(as_tensor(x), axis=-1)


def scaled_dot_attention(q: Tensor, k: Tensor, v: Tensor, return_weights: bool = False):
    """softmax(q kᵀ / √d) v over the last two axes; leading axes broadcast."""
    q, k, v = as_tensor(q), as_tensor(k), as_tensor(v)
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise DimensionError(f"attention needs matrices, got q{q.shape} k{k.shape} v{v.shape}")
    if q.shape[-1] != k.shape[-1]:
        raise DimensionError(f"attention: q{q.shape} and k{k.shape} differ in feature dim")
    if k.shape[-2] != v.shape[-2]:
        raise DimensionError(f"attention: k{k.shape} and v{v.shape} differ in key count")
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = matmul(q, k.swapaxes(-1, -2)) * scale
    weights = softmax(scores, axis=-1)
    out = matmul(weights, v)
    return (out, weights) if return_weights else out


def split_heads(x: Tensor, heads: int) -> Tensor:
    """(..., n, d) -> (..., heads, n, d/heads)."""
    *lead, n, d = x.shape
    if d % heads:
        raise DimensionError(f"feature dim {d} not divisible by {heads} heads")
    x = x.reshape(*lead, n, heads, d // heads)
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(axes)


def merge_heads(x: Tensor) -> Tensor:
    """(..., heads, n, dh) -> (..., n, heads*dh)."""
    *lead, h, n, dh = x.shape
    nd = x.ndim
    axes = list(range(nd - 3)) + [nd - 2, nd - 3, nd - 1]
    return x.transpose(axes).reshape(*lead, n, h * dh)


def multi_head_attention(q: Tensor, k: Tensor, v: Tensor, heads: int) -> Tensor:
    if heads == 1:
        return scaled_dot_attention(q, k, v)
    out = scaled_dot_attention(split_heads(q, heads), split_heads(k, heads), split_heads(v, heads))
    return merge_heads(out)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log-likelihood of integer ``labels`` under softmax(``logits``)."""
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim != 2 or labels.shape != (logits.shape[0],):
        raise DimensionError(f"cross_entropy: logits {logits.shape}, labels {labels.shape}")
    n_classes = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= n_classes):
        raise InputError(f"labels must lie in [0, {n_classes}), got range [{labels.min()}, {labels.max()}]")
    logp = log_softmax(logits, axis=-1)
    picked = logp[np.arange(labels.size), labels]
    return -picked.mean()
