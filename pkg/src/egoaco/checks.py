"""Finite-difference check suites for ``egoaco gradcheck --scope {ops,lsta,full}``.

Every case builds a scalar function and its parameters from a seed.  Scalars
are random projections of the op output, so no gradient is trivially constant.
Cases look ops up through their modules at call time, which lets tests swap in
a broken implementation and watch the named case fail.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from egoaco import gradcheck, lsta, model, ops, pooling
from egoaco.tensor import Tensor

H_STEP = 1e-5
TOLERANCE = {"ops": 1e-6, "lsta": 1e-6, "full": 1e-5}


@dataclass
class CaseResult:
    name: str
    seed: int
    report: gradcheck.GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _project(out: Tensor, rng) -> Callable[[Tensor], Tensor]:
    w = Tensor(rng.standard_normal(out.shape))
    return lambda t: ops.sum(ops.mul(t, w))


def _case(fn, shapes, positive=()):
    """Wrap ``fn(**tensors) -> Tensor`` into a builder over random inputs."""
    def build(seed):
        rng = np.random.default_rng(seed)
        params = {}
        for name, shape in shapes.items():
            x = rng.standard_normal(shape)
            params[name] = np.abs(x) + 0.5 if name in positive else x
        proj = _project(fn(**{k: Tensor(v) for k, v in params.items()}), rng)
        return (lambda p: proj(fn(**p))), params
    return build


OP_CASES = {
    "matmul": _case(lambda a, b: ops.matmul(a, b), {"a": (2, 3, 4), "b": (4, 5)}),
    "conv2d": _case(lambda x, w, b: ops.conv2d(x, w, b), {"x": (2, 3, 5, 4), "w": (4, 3, 3, 3), "b": (4,)}),
    "add": _case(lambda a, b: ops.add(a, b), {"a": (3, 4), "b": (4,)}),
    "sub": _case(lambda a, b: ops.sub(a, b), {"a": (3, 1), "b": (3, 4)}),
    "mul": _case(lambda a, b: ops.mul(a, b), {"a": (2, 3, 4), "b": (3, 1)}),
    "scale": _case(lambda a: ops.scale(a, -1.7), {"a": (5,)}),
    "sigmoid": _case(lambda a: ops.sigmoid(a), {"a": (4, 3)}),
    "tanh": _case(lambda a: ops.tanh(a), {"a": (4, 3)}),
    "exp": _case(lambda a: ops.exp(a), {"a": (4, 3)}),
    "log": _case(lambda a: ops.log(a), {"a": (4, 3)}, positive=("a",)),
    "softmax": _case(lambda a: ops.softmax(a, axis=-1), {"a": (3, 6)}),
    "log_softmax": _case(lambda a: ops.log_softmax(a, axis=0), {"a": (5, 2)}),
    "sum": _case(lambda a: ops.sum(a, axis=(0, 2)), {"a": (2, 3, 4)}),
    "mean": _case(lambda a: ops.mean(a, axis=1, keepdims=True), {"a": (2, 3, 4)}),
    "max": _case(lambda a: ops.max(a, axis=-1), {"a": (3, 5)}),
    "reshape": _case(lambda a: ops.reshape(a, (6, 4)), {"a": (2, 3, 4)}),
    "transpose": _case(lambda a: ops.transpose(a, (2, 0, 1)), {"a": (2, 3, 4)}),
    "concat": _case(lambda a, b: ops.concat([a, b], axis=1), {"a": (2, 3), "b": (2, 2)}),
    "stack": _case(lambda a, b: ops.stack([a, b], axis=-1), {"a": (2, 3), "b": (2, 3)}),
    "index": _case(lambda a: ops.index(a, (slice(1, None), 2)), {"a": (3, 4)}),
    "take": _case(lambda a: ops.take(a, np.array([2, 0, 2]), axis=1), {"a": (2, 4)}),
    "take_along": _case(lambda a: ops.take_along(a, np.array([[1], [0], [3]]), axis=1), {"a": (3, 4)}),
    "avg_pool2": _case(lambda a: ops.avg_pool2(a), {"a": (2, 3, 4, 6)}),
    "cap_pool": _case(lambda X, A, B: pooling.cap_pool(X, A, B).descriptor, {"X": (7, 4), "A": (4, 3), "B": (4, 5)}),
    "ca_attn": _case(lambda x, A: pooling.ca_attn(x, A)[0], {"x": (3, 2, 4), "A": (4, 3)}),
    "object_descriptor": _case(lambda x, A, B: pooling.object_descriptor(x, A, B).descriptor,
                               {"x": (3, 2, 2, 4), "A": (4, 2), "B": (4, 3)}),
    "context_descriptor": _case(lambda x, A, B: pooling.context_descriptor(x, A, B).descriptor,
                                {"x": (3, 2, 2, 4), "A": (4, 2), "B": (4, 3)}),
}


def _lsta_shapes(K=3, M=3, C=2, D=2, fine=True):
    o_in = 2 * M if fine else K + M
    k = lsta.KERNEL
    return {"A_act": (K, C), "A_mem": (M, D), "A_o": (K, M), "W_c": (3 * M, K + M, k, k), "b_c": (3 * M,),
            "W_o": (M, o_in, k, k), "b_o": (M,), "tracker_W": (4, 2, k, k), "tracker_b": (4,)}


def _sequence_case(variant: lsta.AblationVariant, outer: bool = False):
    flags = variant.flags
    shapes = {"x": (3, 3, 4, 3), **_lsta_shapes(fine=flags.fine_gating)}  # T x H x W x K
    if outer:
        shapes["A_o_cols"] = (shapes["A_mem"][1],)

    def fn(x, **p):
        seq = lsta.encode_sequence(x, lsta.LstaParams(**p), variant)
        return ops.sum(seq.d_act)
    return _case(fn, shapes)


def _step_case(variant: lsta.AblationVariant):
    flags = variant.flags
    shapes = {"x": (3, 3, 4), "r": (1, 3, 4), "o": (3, 3, 4), "c": (3, 3, 4), "mem": (1, 3, 4),
              **_lsta_shapes(fine=flags.fine_gating)}

    def fn(x, r, o, c, mem, **p):
        state = lsta.LstaState(r=r, o=o, c=c, tracker_mem=mem)
        new, _ = lsta.lsta_step(x, state, lsta.LstaParams(**p), variant)
        return ops.concat([ops.reshape(new.c, (-1,)), ops.reshape(new.o, (-1,)), ops.reshape(new.r, (-1,))], axis=0)
    return _case(fn, shapes)


LSTA_CASES = {
    "tracker_step": _case(lambda s, r, m, W, b: ops.concat(
        [ops.reshape(t, (-1,)) for t in lsta.tracker_step(s, r, m, W, b)], axis=0),
        {"s": (1, 3, 4), "r": (1, 3, 4), "m": (1, 3, 4), "W": (4, 2, 3, 3), "b": (4,)}),
    **{f"lsta_step[{v.name}]": _step_case(v) for v in lsta.AblationVariant},
    **{f"encode_sequence[{v.name}]": _sequence_case(v) for v in lsta.AblationVariant},
    "encode_sequence[FullLsta, outer coupling]": _sequence_case(lsta.AblationVariant.FullLsta, outer=True),
}


def full_model_config() -> model.ModelConfig:
    """Smallest configuration that still exercises every branch and flag."""
    return model.ModelConfig(num_verbs=3, num_nouns=4, num_actions=5, image_size=8, trunk_channels=(3,),
                             K=4, M_act=4, C=3, D=2, variant="FullLsta", dropout=0.0)


def full_case(seed: int, T: int = 3, batch: int = 2):
    cfg = full_model_config()
    rng = np.random.default_rng(seed)
    params = {k: v.data + 0.1 * rng.standard_normal(v.shape) for k, v in model.init_params(cfg, seed).items()}
    frames = Tensor(rng.standard_normal((batch, T, 3, cfg.image_size, cfg.image_size)))
    labels = (rng.integers(0, cfg.num_verbs, batch), rng.integers(0, cfg.num_nouns, batch),
              rng.integers(0, cfg.num_actions, batch))

    def f(p):
        logits, _ = model.forward(cfg, p, frames)
        return model.multitask_loss(logits, labels)
    return f, params


def run_scope(scope: str, seeds=range(10), h: float = H_STEP, tol: float | None = None, log=None) -> list[CaseResult]:
    if scope == "ops":
        cases = OP_CASES
    elif scope == "lsta":
        cases = LSTA_CASES
    elif scope == "full":
        cases = {"full_model": full_case}
    else:
        raise ValueError(f"unknown scope {scope!r}; choose ops, lsta or full")
    tol = TOLERANCE[scope] if tol is None else tol
    results = []
    for name, build in cases.items():
        for seed in seeds:
            f, params = build(seed)
            res = CaseResult(name, seed, gradcheck.grad_check(f, params, h=h, tol=tol))
            results.append(res)
            if log is not None:
                log(res)
    return results
