"""Class activation pooling and the descriptors built on it.

Feature matrices are ``N x K`` (locations by channels).  Every function also
accepts leading batch axes, ``... x N x K``; the dictionary selector then runs
independently per batch entry.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from egoaco import ops, selection
from egoaco.tensor import DimensionError, Tensor, as_tensor


@dataclass
class CapOutput:
    descriptor: Tensor  # attention^T X B
    attention: Tensor   # softmax over locations
    selected_index: int | np.ndarray
    pooled: Tensor      # attention^T X, before the embedding


@dataclass
class ContextOutput:
    descriptor: Tensor        # sum of per-frame descriptors
    attention: Tensor         # ... x T x HW
    selected_index: np.ndarray
    pooled: Tensor            # sum of per-frame pooled features, ... x K


def _check_features(X: Tensor, K: int, what: str):
    if X.ndim < 2:
        raise DimensionError(f"{what}: feature matrix must be rank >= 2, got {X.shape}")
    if X.shape[-1] != K:
        raise DimensionError(f"{what}: features have {X.shape[-1]} channels, weights expect {K}")


def pool_first_order(X, W) -> Tensor:
    """``1^T X W``: spatial sum followed by a linear map."""
    X, W = as_tensor(X), as_tensor(W)
    _check_features(X, W.shape[0], "pool_first_order")
    return ops.matmul(ops.sum(X, axis=-2), W)


def pool_rank1(X, a, B) -> Tensor:
    """``(X a)^T X B`` with no normalisation of the scores."""
    X, a, B = as_tensor(X), as_tensor(a), as_tensor(B)
    _check_features(X, B.shape[0], "pool_rank1")
    if a.shape != (X.shape[-1],):
        raise DimensionError(f"pool_rank1: attention vector {a.shape} does not match K={X.shape[-1]}")
    scores = ops.matmul(X, a)
    return ops.matmul(_weighted_sum(scores, X), B)


def selector_scores(X, A) -> np.ndarray:
    """Sum-pooled score ``1^T X a_c`` of every dictionary entry (no gradient)."""
    X, A = as_tensor(X), as_tensor(A)
    return X.data.sum(axis=-2) @ A.data


def select_entry(X, A):
    """Index of the dictionary column with the highest sum-pooled score.

    Ties go to the smallest index.  Returns an int for an unbatched ``X``.
    """
    X, A = as_tensor(X), as_tensor(A)
    _check_features(X, A.shape[0], "select_entry")
    if A.ndim != 2 or A.shape[1] < 1:
        raise DimensionError(f"attention dictionary must be K x C with C >= 1, got {A.shape}")
    idx = selection.argmax_last(selector_scores(X, A))
    return int(idx) if idx.ndim == 0 else idx


def dictionary_column(A, index) -> Tensor:
    """Column ``a_c`` of ``A``; with an index array the result is ``... x K``."""
    A = as_tensor(A)
    idx = np.asarray(index)
    col = ops.take(A, idx, axis=1)  # K x ...
    if idx.ndim == 0:
        return col
    return ops.transpose(col, tuple(range(1, idx.ndim + 1)) + (0,))


def attention_scores(X, a) -> Tensor:
    """``X a`` for matching batch layouts: ``... x N x K`` with ``a`` of ``K`` or ``... x K``."""
    X, a = as_tensor(X), as_tensor(a)
    if a.ndim == 1:
        return ops.matmul(X, a)
    s = ops.matmul(X, ops.reshape(a, a.shape + (1,)))
    return ops.reshape(s, s.shape[:-1])


def _weighted_sum(weights: Tensor, X: Tensor) -> Tensor:
    # weights ... x N, X ... x N x K -> ... x K
    w = ops.reshape(weights, weights.shape[:-1] + (1, weights.shape[-1]))
    out = ops.matmul(w, X)
    return ops.reshape(out, out.shape[:-2] + (out.shape[-1],))


def cap_pool(X, A, B) -> CapOutput:
    """``softmax(X a_c*)^T X B`` with ``c* = argmax_c 1^T X a_c``.

    The selector is a hard switch: gradients reach ``X``, ``B`` and only the
    chosen column of ``A``.  Passing ``A is B`` gives the CAM variant.
    """
    X, A, B = as_tensor(X), as_tensor(A), as_tensor(B)
    _check_features(X, B.shape[0], "cap_pool")
    if A.shape[0] != B.shape[0]:
        raise DimensionError(f"cap_pool: dictionary {A.shape} and embedding {B.shape} disagree on K")
    c = select_entry(X, A)
    attn = ops.softmax(attention_scores(X, dictionary_column(A, c)), axis=-1)
    pooled = _weighted_sum(attn, X)
    return CapOutput(ops.matmul(pooled, B), attn, c, pooled)


def ca_attn(x, A, batch_dims: int = 0):
    """Attention-weighted features of the same shape as ``x`` (channels last).

    Returns ``(weighted, attention)`` where ``attention`` has the shape of ``x``
    without its channel axis.
    """
    x, A = as_tensor(x), as_tensor(A)
    if x.ndim < batch_dims + 2:
        raise DimensionError(f"ca_attn: need a spatial axis after {batch_dims} batch axes, got {x.shape}")
    if x.shape[-1] != A.shape[0]:
        raise DimensionError(f"ca_attn: channel extent {x.shape[-1]} != dictionary K {A.shape[0]}")
    lead = x.shape[:batch_dims]
    spatial = x.shape[batch_dims:-1]
    X = ops.reshape(x, lead + (int(np.prod(spatial)), x.shape[-1]))
    c = select_entry(X, A)
    attn = ops.softmax(attention_scores(X, dictionary_column(A, c)), axis=-1)
    weighted = ops.mul(ops.reshape(attn, attn.shape + (1,)), X)
    return ops.reshape(weighted, x.shape), ops.reshape(attn, lead + spatial)


def object_descriptor(x, A_obj, B_obj, batch_dims: int = 0) -> CapOutput:
    """Spatio-temporal CAP over a ``T x H x W x K`` volume (attention over HWT)."""
    x = as_tensor(x)
    if x.ndim != batch_dims + 4:
        raise DimensionError(f"object_descriptor expects T x H x W x K after {batch_dims} batch axes, got {x.shape}")
    lead = x.shape[:batch_dims]
    T, H, W, K = x.shape[batch_dims:]
    return cap_pool(ops.reshape(x, lead + (T * H * W, K)), A_obj, B_obj)


def context_descriptor(x, A_ctx, B_ctx, batch_dims: int = 0) -> ContextOutput:
    """Frame-wise CAP (selector per frame), sum-pooled over time."""
    x = as_tensor(x)
    if x.ndim != batch_dims + 4:
        raise DimensionError(f"context_descriptor expects T x H x W x K after {batch_dims} batch axes, got {x.shape}")
    lead = x.shape[:batch_dims]
    T, H, W, K = x.shape[batch_dims:]
    frames = cap_pool(ops.reshape(x, lead + (T, H * W, K)), A_ctx, B_ctx)
    return ContextOutput(
        descriptor=ops.sum(frames.descriptor, axis=-2),
        attention=frames.attention,
        selected_index=np.asarray(frames.selected_index),
        pooled=ops.sum(frames.pooled, axis=-2),
    )
