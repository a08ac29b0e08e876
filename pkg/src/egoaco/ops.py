"""Differentiable operations on :class:`~egoaco.tensor.Tensor`.

Every function accepts Tensors (or array-likes, treated as constants) and
returns a new Tensor.  Backward closures receive the upstream gradient ``g``
and a tuple ``needs`` flagging which inputs are tracked.
"""
from __future__ import annotations

import numpy as np

from egoaco import kernels
from egoaco.tensor import DimensionError, Tensor, as_tensor, record


class ConfigurationError(ValueError):
    """An operation was configured with unsupported hyper-parameters."""


class InputError(ValueError):
    """Labels, pairs or data outside their declared ranges."""


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def _broadcast_shape(a, b, op):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ------------------------------------------------------------------ linear algebra

def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching rules on leading axes."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 1 or b.ndim < 1:
        raise DimensionError("matmul needs operands of rank >= 1")
    ka = a.shape[-1]
    kb = b.shape[-2] if b.ndim >= 2 else b.shape[0]
    if ka != kb:
        raise DimensionError(f"matmul: inner extents differ, {a.shape} @ {b.shape}")
    A, B = a.data, b.data
    out = A @ B

    def backward(g, needs):
        A2 = A[None, :] if A.ndim == 1 else A
        B2 = B[:, None] if B.ndim == 1 else B
        g2 = g
        if A.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if B.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = gb = None
        if needs[0]:
            ga = _unbroadcast(g2 @ np.swapaxes(B2, -1, -2), A2.shape).reshape(A.shape)
        if needs[1]:
            gb = _unbroadcast(np.swapaxes(A2, -1, -2) @ g2, B2.shape).reshape(B.shape)
        return ga, gb

    return record("matmul", out, (a, b), backward)


def conv2d(x, kernel, bias) -> Tensor:
    """Stride-1 convolution with zero "same" padding.

    ``x`` is ``Cin x H x W`` or batched ``B x Cin x H x W``; ``kernel`` is
    ``Cout x Cin x kh x kw`` with odd ``kh``, ``kw``; ``bias`` is ``Cout``.
    """
    x, kernel, bias = as_tensor(x), as_tensor(kernel), as_tensor(bias)
    if kernel.ndim != 4:
        raise DimensionError(f"conv2d kernel must be rank 4, got {kernel.shape}")
    cout, cin, kh, kw = kernel.shape
    if kh % 2 == 0 or kw % 2 == 0:
        raise ConfigurationError(f"conv2d needs odd kernel extents, got {kh}x{kw}")
    if x.ndim not in (3, 4):
        raise DimensionError(f"conv2d input must be rank 3 or 4, got {x.shape}")
    if x.shape[-3] != cin:
        raise DimensionError(f"conv2d: input has {x.shape[-3]} channels, kernel expects {cin}")
    if bias.shape != (cout,):
        raise DimensionError(f"conv2d bias must have shape ({cout},), got {bias.shape}")
    single = x.ndim == 3
    X = x.data[None] if single else x.data
    fwd, bwd = kernels.get_kernels()
    out = fwd(X, kernel.data, bias.data)
    W = kernel.data

    def backward(g, needs):
        G = g[None] if single else g
        gx, gw, gb = bwd(X, W, G, needs[0], needs[1])
        if gx is not None and single:
            gx = gx[0]
        return gx, gw, (gb if needs[2] else None)

    return record("conv2d", out[0] if single else out, (x, kernel, bias), backward)


# ------------------------------------------------------------------ elementwise

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(g, sb) if needs[1] else None)

    return record("add", a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape

    def backward(g, needs):
        return (_unbroadcast(g, sa) if needs[0] else None,
                _unbroadcast(-g, sb) if needs[1] else None)

    return record("sub", a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    """Hadamard product (numpy broadcasting)."""
    a, b = as_tensor(a), as_tensor(b)
    _broadcast_shape(a, b, "mul")
    A, B = a.data, b.data

    def backward(g, needs):
        return (_unbroadcast(g * B, A.shape) if needs[0] else None,
                _unbroadcast(g * A, B.shape) if needs[1] else None)

    return record("mul", A * B, (a, b), backward)


hadamard = mul


def scale(x, s: float) -> Tensor:
    x = as_tensor(x)
    s = float(s)
    return record("scale", x.data * s, (x,), lambda g, needs: (g * s,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    X = x.data
    e = np.exp(-np.abs(X))
    y = np.where(X >= 0, 1.0 / (1.0 + e), e / (1.0 + e))
    return record("sigmoid", y, (x,), lambda g, needs: (g * y * (1.0 - y),))


def tanh(x) -> Tensor:
    x = as_tensor(x)
    y = np.tanh(x.data)
    return record("tanh", y, (x,), lambda g, needs: (g * (1.0 - y * y),))


def exp(x) -> Tensor:
    x = as_tensor(x)
    y = np.exp(x.data)
    return record("exp", y, (x,), lambda g, needs: (g * y,))


def log(x) -> Tensor:
    x = as_tensor(x)
    X = x.data
    return record("log", np.log(X), (x,), lambda g, needs: (g / X,))


_ELEMENTWISE = {"sigmoid": sigmoid, "tanh": tanh, "hadamard": mul, "add": add, "scale": scale}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name: ``sigmoid``, ``tanh``, ``hadamard``, ``add``, ``scale``."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(*args)


# ------------------------------------------------------------------ softmax family

def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    X = x.data
    z = np.exp(X - X.max(axis=axis, keepdims=True))
    y = z / z.sum(axis=axis, keepdims=True)

    def backward(g, needs):
        return (y * (g - (g * y).sum(axis=axis, keepdims=True)),)

    return record("softmax", y, (x,), backward)


def log_softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    X = x.data
    shifted = X - X.max(axis=axis, keepdims=True)
    y = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    p = np.exp(y)

    def backward(g, needs):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return record("log_softmax", y, (x,), backward)


# ------------------------------------------------------------------ reductions

def _norm_axes(axes, ndim):
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise DimensionError(f"axis {ax} out of range for rank {ndim}")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise DimensionError(f"repeated axes {axes}")
    return tuple(sorted(out))


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    y = x.data.sum(axis=axes, keepdims=keepdims)

    def backward(g, needs):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape),)

    return record("sum", np.asarray(y), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(sum(x, axes, keepdims), 1.0 / count)


def max(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001 - mirrors numpy
    """Maximum; the gradient goes to the first maximal element on ties."""
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    keep = tuple(a for a in range(x.ndim) if a not in axes)
    X = x.data
    moved = np.transpose(X, keep + axes)
    lead = moved.shape[: len(keep)]
    flat = moved.reshape(lead + (-1,))
    arg = flat.argmax(axis=-1)
    y = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    if keepdims:
        y = np.expand_dims(y, axes)

    def backward(g, needs):
        gk = g if not keepdims else g.reshape(lead)
        gflat = np.zeros(flat.shape)
        np.put_along_axis(gflat, arg[..., None], np.asarray(gk)[..., None], axis=-1)
        inv = np.argsort(keep + axes)
        return (np.transpose(gflat.reshape(moved.shape), inv),)

    return record("max", np.asarray(y), (x,), backward)


_REDUCE = {"sum": sum, "mean": mean, "max": max}


def reduce(kind: str, x, axes=None, keepdims: bool = False) -> Tensor:
    try:
        fn = _REDUCE[kind]
    except KeyError:
        raise ValueError(f"unknown reduction {kind!r}") from None
    return fn(x, axes, keepdims)


# ------------------------------------------------------------------ shape manipulation

def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    shape = tuple(int(s) for s in shape)
    try:
        y = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"cannot reshape {x.shape} into {shape}") from None
    src = x.shape
    return record("reshape", y, (x,), lambda g, needs: (g.reshape(src),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(a % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise DimensionError(f"invalid permutation {axes} for rank {x.ndim}")
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(x.data, axes), (x,), lambda g, needs: (np.transpose(g, inv),))


def concat(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of nothing")
    nd = ts[0].ndim
    if not -nd <= axis < nd:
        raise DimensionError(f"axis {axis} out of range for rank {nd}")
    ax = axis % nd
    for t in ts[1:]:
        if t.ndim != nd or any(t.shape[i] != ts[0].shape[i] for i in range(nd) if i != ax):
            raise DimensionError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {ax}")
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def backward(g, needs):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) if needs[i] else None
            for i in range(len(ts)))

    return record("concat", np.concatenate([t.data for t in ts], axis=ax), ts, backward)


def stack(tensors, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("stack of nothing")
    shape = ts[0].shape
    if any(t.shape != shape for t in ts):
        raise DimensionError(f"stack: shapes {[t.shape for t in ts]} differ")
    ax = axis % (len(shape) + 1)

    def backward(g, needs):
        return tuple(np.take(g, i, axis=ax) if needs[i] else None for i in range(len(ts)))

    return record("stack", np.stack([t.data for t in ts], axis=ax), ts, backward)


def index(x, key) -> Tensor:
    """Basic (slice/int) indexing."""
    x = as_tensor(x)
    y = x.data[key]
    shape = x.shape

    def backward(g, needs):
        gx = np.zeros(shape)
        gx[key] = g
        return (gx,)

    return record("index", np.array(y), (x,), backward)


def take(x, indices, axis: int) -> Tensor:
    """Gather entries at integer ``indices`` along ``axis`` (like ``np.take``)."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    ax = axis % x.ndim
    n = x.shape[ax]
    if idx.size and (idx.min() < -n or idx.max() >= n):
        raise DimensionError(f"take: index out of range for extent {n}")
    shape = x.shape

    def backward(g, needs):
        gx = np.zeros(shape)
        moved = np.moveaxis(gx, ax, 0)
        gm = np.moveaxis(g, list(range(ax, ax + idx.ndim)), list(range(idx.ndim)))
        np.add.at(moved, idx, gm)
        return (gx,)

    return record("take", np.take(x.data, idx, axis=ax), (x,), backward)


def take_along(x, indices, axis: int) -> Tensor:
    """``np.take_along_axis`` with gradient scatter-add."""
    x = as_tensor(x)
    idx = np.asarray(indices, dtype=np.int64)
    shape = x.shape

    def backward(g, needs):
        gx = np.zeros(shape)
        np.add.at(gx, _along_index(idx, axis, len(shape)), g)
        return (gx,)

    return record("take_along", np.take_along_axis(x.data, idx, axis=axis), (x,), backward)


def _along_index(idx, axis, ndim):
    axis %= ndim
    grids = np.ogrid[tuple(slice(0, s) for s in idx.shape)]
    return tuple(idx if d == axis else grids[d] for d in range(ndim))


def avg_pool2(x) -> Tensor:
    """2x2 average pooling on the two trailing axes (extents must be even)."""
    x = as_tensor(x)
    *lead, h, w = x.shape
    if h % 2 or w % 2:
        raise DimensionError(f"avg_pool2 needs even spatial extents, got {h}x{w}")
    return mean(reshape(x, (*lead, h // 2, 2, w // 2, 2)), axis=(-3, -1))
