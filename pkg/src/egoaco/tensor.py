"""Dense float64 tensors and a reverse-mode differentiation tape.

Tensors are immutable wrappers around a read-only ``numpy.ndarray``.  Operations
in :mod:`egoaco.ops` record a node on the active :class:`Tape` whenever at
least one input is tracked by it; untracked computations cost nothing extra.

    with Tape() as tape:
        tape.watch(w)
        loss = ops.sum(ops.sigmoid(ops.matmul(x, w)))
    (gw,) = tape.gradient(loss, [w])
"""
from __future__ import annotations

import contextvars
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np


class DimensionError(ValueError):
    """Operand shapes do not conform."""


_ACTIVE_TAPE: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar("egoaco_tape", default=None)


class Tensor:
    __slots__ = ("data", "_tape", "_node")

    def __init__(self, data, *, copy: bool = True):
        arr = np.array(data, dtype=np.float64, copy=copy)
        if arr.dtype != np.float64:  # pragma: no cover - np.array already coerces
            arr = arr.astype(np.float64)
        arr.flags.writeable = False
        self.data = arr
        self._tape = None
        self._node = None

    @classmethod
    def _wrap(cls, arr: np.ndarray, tape: "Tape | None" = None, node: int | None = None) -> "Tensor":
        t = cls.__new__(cls)
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
        if arr.flags.writeable:
            arr.flags.writeable = False
        t.data = arr
        t._tape = tape
        t._node = node
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def tape_id(self) -> int | None:
        return self._node

    def numpy(self) -> np.ndarray:
        """Return a writable copy of the payload."""
        return np.array(self.data)

    def item(self) -> float:
        return float(self.data)

    def __repr__(self):
        tracked = f", tape_id={self._node}" if self._node is not None else ""
        return f"Tensor(shape={self.shape}{tracked})"

    def __len__(self):
        return self.shape[0]

    # arithmetic sugar; the implementations live in egoaco.ops
    def __add__(self, other):
        from egoaco import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from egoaco import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from egoaco import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from egoaco import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from egoaco import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from egoaco import ops
        return ops.matmul(self, other)

    def __getitem__(self, key):
        from egoaco import ops
        return ops.index(self, key)

    @property
    def T(self):
        from egoaco import ops
        return ops.transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    kind: str
    inputs: tuple[int | None, ...]
    backward: Callable | None  # g -> sequence of input grads (None where not needed)


class Tape:
    """Append-only record of differentiable operations.

    A tape is single use: build it during one forward pass, call
    :meth:`gradient` once.  It must stay on the thread that created it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._leaves: dict[int, int] = {}
        self._watched: list[Tensor] = []  # keeps ids stable while watched
        self._token = None
        self._used = False

    def __enter__(self):
        self._token = _ACTIVE_TAPE.set(self)
        return self

    def __exit__(self, *exc):
        _ACTIVE_TAPE.reset(self._token)
        self._token = None
        return False

    def watch(self, *tensors: Tensor) -> None:
        for t in tensors:
            if not isinstance(t, Tensor):
                raise TypeError(f"can only watch Tensor, got {type(t).__name__}")
            if id(t) in self._leaves or t._tape is self:
                continue
            self._leaves[id(t)] = len(self.nodes)
            self._watched.append(t)
            self.nodes.append(_Node("leaf", (), None))

    def handle(self, t: Tensor) -> int | None:
        if t._tape is self:
            return t._node
        return self._leaves.get(id(t))

    def record(self, kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
        handles = tuple(self.handle(t) for t in inputs)
        if all(h is None for h in handles):
            return Tensor._wrap(out)
        self.nodes.append(_Node(kind, handles, backward))
        return Tensor._wrap(out, self, len(self.nodes) - 1)

    def gradient(self, target: Tensor, sources: Sequence[Tensor], seed: np.ndarray | None = None) -> list[Tensor]:
        """Gradients of ``target`` with respect to each of ``sources``.

        Visits nodes in strict reverse creation order, accumulating additively.
        Sources the target does not depend on get zero gradients.
        """
        if self._used:
            raise RuntimeError("tape already consumed; rebuild it with a fresh forward pass")
        self._used = True
        root = self.handle(target)
        if seed is None:
            if target.size != 1:
                raise DimensionError(f"gradient of non-scalar target {target.shape} needs an explicit seed")
            seed = np.ones(target.shape)
        grads: dict[int, np.ndarray] = {}
        if root is not None:
            grads[root] = np.array(seed, dtype=np.float64)
            for idx in range(root, -1, -1):
                g = grads.get(idx)
                node = self.nodes[idx]
                if g is None or node.backward is None:
                    continue
                needs = tuple(h is not None for h in node.inputs)
                in_grads = node.backward(g, needs)
                for h, gi in zip(node.inputs, in_grads):
                    if h is None or gi is None:
                        continue
                    prev = grads.get(h)
                    grads[h] = gi if prev is None else prev + gi
        out = []
        for s in sources:
            h = self.handle(s)
            g = grads.get(h) if h is not None else None
            out.append(Tensor._wrap(np.zeros(s.shape) if g is None else np.asarray(g, dtype=np.float64).reshape(s.shape)))
        return out


def active_tape() -> Tape | None:
    return _ACTIVE_TAPE.get()


def record(kind: str, out: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``out`` and, if a tape is active and tracks any input, add a node."""
    tape = _ACTIVE_TAPE.get()
    if tape is None:
        return Tensor._wrap(out)
    return tape.record(kind, out, inputs, backward)
