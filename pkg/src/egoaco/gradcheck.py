"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from egoaco import selection
from egoaco.tensor import Tape, Tensor


class EvaluationError(RuntimeError):
    """The checked function produced a non-finite value."""


@dataclass
class GradCheckReport:
    errors: dict[str, float]
    h: float
    tol: float
    coords_checked: dict[str, int] = field(default_factory=dict)
    selector_flips: int = 0

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error < self.tol and self.selector_flips == 0

    def worst(self) -> str | None:
        if not self.errors:
            return None
        return max(self.errors, key=self.errors.get)


def relative_error(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(1.0, np.maximum(np.abs(analytic), np.abs(numeric)))
    return np.abs(analytic - numeric) / denom


def _scalar(value) -> float:
    v = float(value.data if isinstance(value, Tensor) else value)
    if not np.isfinite(v):
        raise EvaluationError(f"function returned non-finite value {v}")
    return v


def grad_check(f: Callable[[dict[str, Tensor]], Tensor], params: Mapping[str, object], h: float = 1e-5,
               tol: float = 1e-6, max_coords: int | None = None, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of scalar ``f(params)`` with central differences.

    Argmax selections made inside ``f`` are recorded on the analytic pass and
    replayed for every perturbed evaluation.  ``max_coords`` caps how many
    coordinates per parameter are probed (chosen at random with ``seed``).
    """
    base = {k: (v.numpy() if isinstance(v, Tensor) else np.array(v, dtype=np.float64)) for k, v in params.items()}
    tensors = {k: Tensor(v) for k, v in base.items()}
    with selection.recording() as trace, Tape() as tape:
        tape.watch(*tensors.values())
        out = f(tensors)
        _scalar(out)
        grads = tape.gradient(out, list(tensors.values()))
    analytic = {k: g.data for k, g in zip(tensors, grads)}

    rng = np.random.default_rng(seed)
    errors, counts = {}, {}
    for name, value in base.items():
        n = value.size
        coords = np.arange(n)
        if max_coords is not None and n > max_coords:
            coords = np.sort(rng.choice(n, size=max_coords, replace=False))
        worst = 0.0
        for flat in coords:
            vals = []
            for sign in (1.0, -1.0):
                pert = value.copy()
                pert.flat[flat] += sign * h
                probe = dict(tensors)
                probe[name] = Tensor(pert, copy=False)
                with selection.replaying(trace):
                    vals.append(_scalar(f(probe)))
            numeric = (vals[0] - vals[1]) / (2.0 * h)
            worst = max(worst, float(relative_error(analytic[name].flat[flat], numeric)))
        errors[name] = worst
        counts[name] = len(coords)
    return GradCheckReport(errors=errors, h=h, tol=tol, coords_checked=counts, selector_flips=trace.flips)
