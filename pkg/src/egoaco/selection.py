"""Hard argmax choices that can be recorded once and replayed.

Dictionary selectors are non-differentiable switches.  Finite-difference
checks must hold them fixed at their forward-pass values, otherwise a
perturbation that flips an argmax makes the numeric derivative meaningless.
"""
from __future__ import annotations

import contextvars
from contextlib import contextmanager

import numpy as np

_TRACE: contextvars.ContextVar["SelectionTrace | None"] = contextvars.ContextVar("egoaco_selection", default=None)


class SelectionTrace:
    def __init__(self):
        self.choices: list[np.ndarray] = []
        self.replaying = False
        self.cursor = 0
        self.flips = 0  # replayed choices that differ from the live argmax

    def __len__(self):
        return len(self.choices)


def argmax_last(scores: np.ndarray) -> np.ndarray:
    """Argmax over the last axis, ties to the lowest index, honouring any active trace."""
    idx = np.asarray(np.argmax(scores, axis=-1))
    trace = _TRACE.get()
    if trace is None:
        return idx
    if not trace.replaying:
        trace.choices.append(idx.copy())
        return idx
    if trace.cursor >= len(trace.choices):
        raise RuntimeError("selection replay ran past the recorded choices")
    frozen = trace.choices[trace.cursor]
    trace.cursor += 1
    if frozen.shape != idx.shape:
        raise RuntimeError(f"selection replay shape mismatch {frozen.shape} vs {idx.shape}")
    trace.flips += int(np.count_nonzero(frozen != idx))
    return frozen


@contextmanager
def recording():
    trace = SelectionTrace()
    token = _TRACE.set(trace)
    try:
        yield trace
    finally:
        _TRACE.reset(token)


@contextmanager
def replaying(trace: SelectionTrace):
    trace.replaying = True
    trace.cursor = 0
    token = _TRACE.set(trace)
    try:
        yield trace
    finally:
        _TRACE.reset(token)
