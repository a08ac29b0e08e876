"""Long short-term attention (LSTA) recurrent cell.

Maps are channels-first: frame features ``K x H x W``, memory and output gate
``M x H x W``, residual attention ``1 x H x W``, optionally behind leading
batch axes.  The ablation ladder is expressed through :class:`LstaFlags`;
every variant runs the same code with components switched off.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, fields, replace

import numpy as np

from egoaco import ops, selection
from egoaco.ops import ConfigurationError
from egoaco.pooling import dictionary_column
from egoaco.tensor import DimensionError, Tensor, as_tensor

KERNEL = 3


@dataclass(frozen=True)
class LstaFlags:
    rca: bool = True          # recurrent residual attention tracker
    fine_gating: bool = True  # output gate from attended memory
    coupling: bool = True     # memory dictionary shifted by pooled attended input


class AblationVariant(enum.Enum):
    Baseline = LstaFlags(rca=False, fine_gating=False, coupling=False)
    RcaAttn = LstaFlags(rca=True, fine_gating=False, coupling=False)
    FineGating = LstaFlags(rca=False, fine_gating=True, coupling=False)
    RcaPlusGating = LstaFlags(rca=True, fine_gating=True, coupling=False)
    FullLsta = LstaFlags(rca=True, fine_gating=True, coupling=True)

    @property
    def flags(self) -> LstaFlags:
        return self.value

    @classmethod
    def parse(cls, name: str) -> "AblationVariant":
        try:
            return cls[name]
        except KeyError:
            raise ConfigurationError(f"unknown LSTA variant {name!r}; choose from {[v.name for v in cls]}") from None


def as_flags(variant) -> LstaFlags:
    if isinstance(variant, LstaFlags):
        return variant
    if isinstance(variant, AblationVariant):
        return variant.flags
    return AblationVariant.parse(variant).flags


@dataclass
class LstaParams:
    A_act: Tensor      # K x C
    A_mem: Tensor      # M x D
    A_o: Tensor        # K x M
    W_c: Tensor        # 3M x (K + M) x 3 x 3, gates (i, f, c~)
    b_c: Tensor
    W_o: Tensor        # M x (2M or K + M) x 3 x 3
    b_o: Tensor
    tracker_W: Tensor  # 4 x 2 x 3 x 3, gates (i, f, o, g) of a one-plane ConvLSTM
    tracker_b: Tensor
    A_o_cols: Tensor | None = None  # D; set for the outer-product coupling, None for broadcast

    @property
    def K(self) -> int:
        return self.A_act.shape[0]

    @property
    def M(self) -> int:
        return self.A_mem.shape[0]

    @classmethod
    def init(cls, K: int, M: int, C: int, D: int, rng: np.random.Generator, fine_gating: bool = True,
             input_gain: float = 1.0) -> "LstaParams":
        """Kaiming fan-in init; ``input_gain`` scales the kernels reading attended inputs.

        Attention-weighted maps are convex combinations over the ``H*W``
        locations, so ``input_gain = H*W`` restores unit-scale gate inputs.
        """
        def kaiming(shape, fan_in):
            return Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / fan_in), copy=False)

        o_in = 2 * M if fine_gating else K + M
        k2 = KERNEL * KERNEL
        W_c = kaiming((3 * M, K + M, KERNEL, KERNEL), (K + M) * k2)
        W_o = kaiming((M, o_in, KERNEL, KERNEL), o_in * k2)
        return cls(
            A_act=kaiming((K, C), K),
            A_mem=kaiming((M, D), M),
            A_o=kaiming((K, M), K),
            W_c=scale_attended_planes(W_c, K, input_gain),
            b_c=Tensor(np.zeros(3 * M)),
            W_o=scale_attended_planes(W_o, o_in - M, input_gain),
            b_o=Tensor(np.zeros(M)),
            tracker_W=kaiming((4, 2, KERNEL, KERNEL), 2 * k2),
            tracker_b=Tensor(np.zeros(4)),
        )

    def as_dict(self) -> dict[str, Tensor]:
        return {f.name: getattr(self, f.name) for f in fields(self) if getattr(self, f.name) is not None}

    @classmethod
    def from_dict(cls, d) -> "LstaParams":
        return cls(**{f.name: as_tensor(d[f.name]) for f in fields(cls) if f.name in d})

    def replace(self, **kw) -> "LstaParams":
        return replace(self, **{k: as_tensor(v) for k, v in kw.items()})


def scale_attended_planes(W, planes: int, gain: float) -> Tensor:
    """Multiply the first ``planes`` input planes of a gate kernel by ``gain``."""
    w = np.array(as_tensor(W).data)
    w[:, :planes] *= gain
    return Tensor(w, copy=False)


@dataclass
class LstaState:
    r: Tensor            # ... x 1 x H x W
    o: Tensor            # ... x M x H x W
    c: Tensor            # ... x M x H x W
    tracker_mem: Tensor  # ... x 1 x H x W

    @classmethod
    def zeros(cls, lead: tuple[int, ...], M: int, H: int, W: int) -> "LstaState":
        one = Tensor(np.zeros(lead + (1, H, W)), copy=False)
        mem = Tensor(np.zeros(lead + (M, H, W)), copy=False)
        return cls(r=one, o=mem, c=mem, tracker_mem=one)


@dataclass
class StepAux:
    attention: Tensor            # ... x H x W, softmax over H*W
    memory_attention: Tensor | None
    selected: np.ndarray
    memory_selected: np.ndarray | None


def _planes(z: Tensor, start: int, stop: int) -> Tensor:
    return ops.index(z, (Ellipsis, slice(start, stop), slice(None), slice(None)))


def _spatial_softmax(score: Tensor) -> Tensor:
    # ... x H x W -> softmax over H*W, same shape
    lead, (H, W) = score.shape[:-2], score.shape[-2:]
    return ops.reshape(ops.softmax(ops.reshape(score, lead + (H * W,)), axis=-1), score.shape)


def _channel_scores(maps: Tensor, vec: Tensor) -> Tensor:
    """``sum_k maps[..., k, h, w] * vec[..., k]`` as a ``... x H x W`` map."""
    lead, (Kc, H, W) = maps.shape[:-3], maps.shape[-3:]
    flat = ops.reshape(maps, lead + (Kc, H * W))
    row = ops.reshape(vec, vec.shape[:-1] + (1, Kc))
    s = ops.matmul(row, flat)
    return ops.reshape(s, s.shape[:-2] + (H, W)) if vec.ndim > 1 else ops.reshape(s, lead + (H, W))


def _select(maps: Tensor, dictionary: Tensor, extra: np.ndarray | None = None) -> np.ndarray:
    """Selector over dictionary columns; ``extra`` (``... x D``) adds coupling scores."""
    scores = maps.data.sum(axis=(-2, -1)) @ dictionary.data
    if extra is not None:
        scores = scores + extra
    return selection.argmax_last(scores)


def tracker_step(score_map, r_prev, mem_prev, W, b):
    """One step of the single-plane ConvLSTM tracking the attention residual.

    Returns ``(r_t, mem_t)``; ``r_t`` is the hidden output.
    """
    score_map, r_prev, mem_prev = as_tensor(score_map), as_tensor(r_prev), as_tensor(mem_prev)
    if score_map.shape != r_prev.shape or r_prev.shape != mem_prev.shape:
        raise DimensionError(f"tracker_step: shapes {score_map.shape}, {r_prev.shape}, {mem_prev.shape} differ")
    z = ops.conv2d(ops.concat([score_map, r_prev], axis=-3), W, b)
    i = ops.sigmoid(_planes(z, 0, 1))
    f = ops.sigmoid(_planes(z, 1, 2))
    o = ops.sigmoid(_planes(z, 2, 3))
    g = ops.tanh(_planes(z, 3, 4))
    mem = ops.add(ops.mul(f, mem_prev), ops.mul(i, g))
    return ops.mul(o, ops.tanh(mem)), mem


def recurrent_attention(x_t, state: LstaState, params: LstaParams, rca: bool = True):
    """Attention over ``x_t`` from the selected ``A_act`` entry plus a tracked residual.

    Returns ``(r_t, tracker_mem, y_t, attention, selected)``.  With ``rca``
    off the residual is identically zero, which is plain ``ca_attn``.
    """
    x_t = as_tensor(x_t)
    if x_t.shape[-3] != params.K:
        raise DimensionError(f"recurrent_attention: x_t has {x_t.shape[-3]} channels, A_act expects {params.K}")
    c = _select(x_t, params.A_act)
    nu_a = _channel_scores(x_t, dictionary_column(params.A_act, c))  # ... x H x W
    if rca:
        score_map = ops.reshape(nu_a, nu_a.shape[:-2] + (1,) + nu_a.shape[-2:])
        r_t, mem = tracker_step(score_map, state.r, state.tracker_mem, params.tracker_W, params.tracker_b)
        logits = ops.add(nu_a, ops.reshape(r_t, nu_a.shape))
    else:
        r_t, mem = state.r, state.tracker_mem
        logits = nu_a
    attn = _spatial_softmax(logits)
    y_t = ops.mul(ops.reshape(attn, attn.shape[:-2] + (1,) + attn.shape[-2:]), x_t)
    return r_t, mem, y_t, attn, c


def _peephole(state: LstaState) -> Tensor:
    return ops.mul(state.o, ops.tanh(state.c))


def memory_update(y_t, state: LstaState, W_c, b_c) -> Tensor:
    """``c_t = f * c_{t-1} + i * c~`` with gates from ``[y_t, o_{t-1} * tanh(c_{t-1})]``."""
    M = state.c.shape[-3]
    z = ops.conv2d(ops.concat([y_t, _peephole(state)], axis=-3), W_c, b_c)
    i = ops.sigmoid(_planes(z, 0, M))
    f = ops.sigmoid(_planes(z, M, 2 * M))
    g = ops.tanh(_planes(z, 2 * M, 3 * M))
    return ops.add(ops.mul(f, state.c), ops.mul(i, g))


def convlstm_step(y_t, state: LstaState, W_c, b_c, W_o, b_o) -> LstaState:
    """Plain ConvLSTM step recurring on the output gate instead of ``h``."""
    y_t = as_tensor(y_t)
    c_t = memory_update(y_t, state, W_c, b_c)
    o_t = ops.sigmoid(ops.conv2d(ops.concat([y_t, _peephole(state)], axis=-3), W_o, b_o))
    return LstaState(r=state.r, o=o_t, c=c_t, tracker_mem=state.tracker_mem)


def coupling_shift(y_t, A_o) -> Tensor:
    """``A_o^T eps(y_t)`` with eps the spatial sum: one M-vector per sample."""
    y_t, A_o = as_tensor(y_t), as_tensor(A_o)
    return ops.matmul(ops.sum(y_t, axis=(-2, -1)), A_o)


def attended_output_gate(c_t, y_t, state: LstaState, A_mem, A_o, W_o, b_o, coupling: bool = True, cols=None):
    """Output gate computed from the memory filtered by its own attention.

    The memory dictionary is ``A_mem`` plus the coupling shift ``u``: added to
    every column (``cols`` is None), or as the rank-1 update ``u cols^T``.
    Returns ``(o_t, memory_attention, selected)``.
    """
    c_t, A_mem = as_tensor(c_t), as_tensor(A_mem)
    if c_t.shape[-3] != A_mem.shape[0]:
        raise DimensionError(f"attended_output_gate: memory has {c_t.shape[-3]} planes, A_mem expects {A_mem.shape[0]}")
    if coupling:
        shift = coupling_shift(y_t, A_o)
        su = (c_t.data.sum(axis=(-2, -1)) * shift.data).sum(axis=-1)[..., None]
        if cols is None:
            sel = _select(c_t, A_mem, su)
            a = ops.add(dictionary_column(A_mem, sel), shift)
        else:
            cols = as_tensor(cols)
            if cols.shape != (A_mem.shape[1],):
                raise DimensionError(f"attended_output_gate: coupling columns {cols.shape} vs D={A_mem.shape[1]}")
            sel = _select(c_t, A_mem, su * cols.data)
            weight = ops.take(cols, np.asarray(sel), axis=0)
            if weight.ndim:
                weight = ops.reshape(weight, weight.shape + (1,))
            a = ops.add(dictionary_column(A_mem, sel), ops.mul(shift, weight))
    else:
        sel = _select(c_t, A_mem)
        a = dictionary_column(A_mem, sel)
    nu_c = _spatial_softmax(_channel_scores(c_t, a))
    attended = ops.mul(ops.reshape(nu_c, nu_c.shape[:-2] + (1,) + nu_c.shape[-2:]), c_t)
    o_t = ops.sigmoid(ops.conv2d(ops.concat([attended, _peephole(state)], axis=-3), W_o, b_o))
    return o_t, nu_c, sel


def lsta_step(x_t, state: LstaState, params: LstaParams, variant=AblationVariant.FullLsta):
    """One LSTA step; returns ``(new_state, aux)``."""
    flags = as_flags(variant)
    r_t, tmem, y_t, attn, sel = recurrent_attention(x_t, state, params, rca=flags.rca)
    c_t = memory_update(y_t, state, params.W_c, params.b_c)
    if flags.fine_gating:
        o_t, nu_c, msel = attended_output_gate(c_t, y_t, state, params.A_mem, params.A_o,
                                               params.W_o, params.b_o, coupling=flags.coupling,
                                               cols=params.A_o_cols)
    else:
        o_t = ops.sigmoid(ops.conv2d(ops.concat([y_t, _peephole(state)], axis=-3), params.W_o, params.b_o))
        nu_c, msel = None, None
    return LstaState(r=r_t, o=o_t, c=c_t, tracker_mem=tmem), StepAux(attn, nu_c, np.asarray(sel), msel)


@dataclass
class SequenceOutput:
    d_act: Tensor                 # ... x M
    attention: Tensor             # ... x T x H x W
    memory_attention: Tensor | None
    state: LstaState


def encode_sequence(x, params: LstaParams, variant=AblationVariant.FullLsta, channels_first: bool = False,
                    batch_dims: int = 0) -> SequenceOutput:
    """Run LSTA over ``T`` frames and sum-pool the final memory over space.

    ``x`` is ``T x H x W x K`` (or ``T x K x H x W`` with ``channels_first``)
    behind ``batch_dims`` leading axes.
    """
    x = as_tensor(x)
    if x.ndim != batch_dims + 4:
        raise DimensionError(f"encode_sequence expects a rank-{batch_dims + 4} clip, got {x.shape}")
    if not channels_first:
        order = tuple(range(batch_dims)) + tuple(batch_dims + i for i in (0, 3, 1, 2))
        x = ops.transpose(x, order)
    lead = x.shape[:batch_dims]
    T, K, H, W = x.shape[batch_dims:]
    if T < 1:
        raise DimensionError("encode_sequence needs at least one frame")
    state = LstaState.zeros(lead, params.M, H, W)
    attns, mattns = [], []
    for t in range(T):
        x_t = ops.index(x, (slice(None),) * batch_dims + (t,))
        state, aux = lsta_step(x_t, state, params, variant)
        attns.append(aux.attention)
        if aux.memory_attention is not None:
            mattns.append(aux.memory_attention)
    axis = batch_dims
    return SequenceOutput(
        d_act=ops.sum(state.c, axis=(-2, -1)),
        attention=ops.stack(attns, axis=axis),
        memory_attention=ops.stack(mattns, axis=axis) if mattns else None,
        state=state,
    )
