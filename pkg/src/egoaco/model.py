"""The EgoACO network: shared trunk, three descriptor branches, multi-head prediction."""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np

from egoaco import lsta, ops, pooling
from egoaco.ops import ConfigurationError, InputError
from egoaco.tensor import DimensionError, Tensor, as_tensor

BRANCHES = ("obj", "ctx", "act")
REGIMES = {"V+N+A": (1.0, 1.0, 1.0), "V+N": (1.0, 1.0, 0.0), "A": (0.0, 0.0, 1.0)}


@dataclass(frozen=True)
class ModelConfig:
    num_verbs: int = 6
    num_nouns: int = 8
    num_actions: int = 12
    image_size: int = 32
    trunk_channels: tuple[int, ...] = (8, 16, 32)
    K: int = 32
    M_act: int = 32
    C: int = 16
    D: int = 10
    variant: str = "FullLsta"
    branches: tuple[str, ...] = BRANCHES
    noun_from: str = "obj"
    bias_control: bool = True
    dropout: float = 0.5
    dictionary: str = "cap"  # "cap", "attentional" (one-entry dictionaries) or "cam" (A tied to B)
    coupling: str = "broadcast"  # memory dictionary shift on every column, or "outer" (learned column weights)

    def __post_init__(self):
        object.__setattr__(self, "trunk_channels", tuple(self.trunk_channels))
        object.__setattr__(self, "branches", tuple(self.branches))
        self.validate()

    def validate(self):
        for name in ("num_verbs", "num_nouns", "num_actions", "K", "M_act", "C", "D"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be >= 1")
        if not self.trunk_channels:
            raise ConfigurationError("trunk needs at least one block")
        if self.image_size % (2 ** len(self.trunk_channels)):
            raise ConfigurationError(
                f"image_size {self.image_size} not divisible by 2^{len(self.trunk_channels)} trunk downsamples")
        unknown = set(self.branches) - set(BRANCHES)
        if unknown or "act" not in self.branches or len(set(self.branches)) != len(self.branches):
            raise ConfigurationError(f"branches must be distinct entries of {BRANCHES} including 'act', got {self.branches}")
        if self.noun_from not in self.branches:
            raise ConfigurationError(f"noun_from={self.noun_from!r} needs that branch enabled")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigurationError("dropout must be in [0, 1)")
        if self.dictionary not in ("cap", "attentional", "cam"):
            raise ConfigurationError(f"unknown dictionary mode {self.dictionary!r}")
        if self.coupling not in ("broadcast", "outer"):
            raise ConfigurationError(f"unknown coupling mode {self.coupling!r}")
        lsta.as_flags(self.variant)

    @property
    def flags(self) -> lsta.LstaFlags:
        return lsta.as_flags(self.variant)

    @property
    def feature_size(self) -> int:
        return self.image_size // (2 ** len(self.trunk_channels))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["trunk_channels"] = list(self.trunk_channels)
        d["branches"] = list(self.branches)
        return d


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Canonical parameter names and shapes for ``cfg``."""
    k = lsta.KERNEL
    shapes: dict[str, tuple[int, ...]] = {}
    cin = 3
    for i, cout in enumerate(cfg.trunk_channels):
        shapes[f"trunk.conv{i}.W"] = (cout, cin, k, k)
        shapes[f"trunk.conv{i}.b"] = (cout,)
        cin = cout
    for br in cfg.branches:
        shapes[f"branch.{br}.W"] = (cfg.K, cin, k, k)
        shapes[f"branch.{br}.b"] = (cfg.K,)
    C = 1 if cfg.dictionary == "attentional" else cfg.C
    D = 1 if cfg.dictionary == "attentional" else cfg.D
    V, N, A, K, M = cfg.num_verbs, cfg.num_nouns, cfg.num_actions, cfg.K, cfg.M_act
    if "obj" in cfg.branches:
        if cfg.dictionary != "cam":
            shapes["dict.A_obj"] = (K, C)
        shapes["head.B_obj"] = (K, N)
        shapes["head.W_obj_act"] = (K, A)
    if "ctx" in cfg.branches:
        if cfg.dictionary != "cam":
            shapes["dict.A_ctx"] = (K, C)
        shapes["head.B_ctx"] = (K, A)
        if cfg.noun_from == "ctx":
            shapes["head.W_ctx_noun"] = (K, N)
    flags = cfg.flags
    shapes["dict.A_act"] = (K, C)
    shapes["dict.A_mem"] = (M, D)
    shapes["dict.A_o"] = (K, M)
    if cfg.coupling == "outer":
        shapes["dict.A_o_cols"] = (D,)
    o_in = 2 * M if flags.fine_gating else K + M
    shapes["lsta.W_c"] = (3 * M, K + M, k, k)
    shapes["lsta.b_c"] = (3 * M,)
    shapes["lsta.W_o"] = (M, o_in, k, k)
    shapes["lsta.b_o"] = (M,)
    shapes["lsta.tracker.W"] = (4, 2, k, k)
    shapes["lsta.tracker.b"] = (4,)
    shapes["head.W_act_action"] = (M, A)
    shapes["head.W_act_verb"] = (M, V)
    if cfg.noun_from == "act":
        shapes["head.W_act_noun"] = (M, N)
    shapes["head.U_v"] = (A, V)
    shapes["head.U_n"] = (A, N)
    return shapes


def _fan_in(name: str, shape: tuple[int, ...]) -> int:
    if len(shape) == 4:
        return shape[1] * shape[2] * shape[3]
    return shape[0]


HEAD_INIT_STD = 0.01


def init_params(cfg: ModelConfig, seed: int) -> dict[str, Tensor]:
    """Kaiming fan-in Gaussians for convolutions and dictionaries.

    Classifiers start small (the descriptors they read are spatial sums, so
    their scale grows with the map size), bias-control maps and biases at zero.
    LSTA kernels reading attended maps are scaled up by ``h*w``.
    """
    rng = np.random.default_rng(seed)
    out = {}
    for name, shape in parameter_shapes(cfg).items():
        if name.endswith(".b") or name.startswith("lsta.b_") or name in ("head.U_v", "head.U_n"):
            out[name] = Tensor(np.zeros(shape), copy=False)
        elif name == "dict.A_o_cols":
            out[name] = Tensor(np.ones(shape), copy=False)  # starts as the broadcast coupling
        elif name.startswith("head."):
            out[name] = Tensor(rng.standard_normal(shape) * HEAD_INIT_STD, copy=False)
        else:
            out[name] = Tensor(rng.standard_normal(shape) * np.sqrt(2.0 / _fan_in(name, shape)), copy=False)
    # gate kernels reading attention-weighted maps (convex over h*w locations)
    gain = cfg.feature_size ** 2
    out["lsta.W_c"] = lsta.scale_attended_planes(out["lsta.W_c"], cfg.K, gain)
    o_in = out["lsta.W_o"].shape[1]
    out["lsta.W_o"] = lsta.scale_attended_planes(out["lsta.W_o"], o_in - cfg.M_act, gain)
    return out


def check_params(cfg: ModelConfig, params) -> None:
    expected = parameter_shapes(cfg)
    for name, shape in expected.items():
        if name not in params:
            raise ConfigurationError(f"missing parameter {name!r}")
        if tuple(params[name].shape) != shape:
            raise ConfigurationError(f"parameter {name!r} has shape {tuple(params[name].shape)}, config expects {shape}")
    extra = set(params) - set(expected)
    if extra:
        raise ConfigurationError(f"unexpected parameters {sorted(extra)}")


@dataclass
class HeadLogits:
    verb: Tensor
    noun: Tensor
    action: Tensor
    routes: dict[str, Tensor] = field(default_factory=dict)  # per-descriptor action scores
    verb_raw: Tensor | None = None
    noun_raw: Tensor | None = None


@dataclass
class AttentionBundle:
    obj: np.ndarray | None = None   # B x T x h x w, one softmax over all T*h*w
    ctx: np.ndarray | None = None   # B x T x h x w, softmax per frame
    act: np.ndarray | None = None   # B x T x h x w, softmax per frame
    mem: np.ndarray | None = None


def _dropout(x: Tensor, p: float, rng) -> Tensor:
    if rng is None or p == 0.0:
        return x
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return ops.mul(x, Tensor(keep, copy=False))


def _lsta_params(cfg: ModelConfig, p) -> lsta.LstaParams:
    return lsta.LstaParams(
        A_act=p["dict.A_act"], A_mem=p["dict.A_mem"], A_o=p["dict.A_o"],
        W_c=p["lsta.W_c"], b_c=p["lsta.b_c"], W_o=p["lsta.W_o"], b_o=p["lsta.b_o"],
        tracker_W=p["lsta.tracker.W"], tracker_b=p["lsta.tracker.b"], A_o_cols=p.get("dict.A_o_cols"))


def trunk(cfg: ModelConfig, p, x: Tensor) -> Tensor:
    """Shared conv-tanh-pool blocks: ``N x 3 x H x W`` to ``N x C x h x w``."""
    for i in range(len(cfg.trunk_channels)):
        x = ops.avg_pool2(ops.tanh(ops.conv2d(x, p[f"trunk.conv{i}.W"], p[f"trunk.conv{i}.b"])))
    return x


def branches(cfg: ModelConfig, p, x: Tensor) -> dict[str, Tensor]:
    """One conv block per branch; returns ``N x K x h x w`` maps."""
    return {br: ops.tanh(ops.conv2d(x, p[f"branch.{br}.W"], p[f"branch.{br}.b"])) for br in cfg.branches}


def backbone(cfg: ModelConfig, p, frames: Tensor) -> dict[str, Tensor]:
    return branches(cfg, p, trunk(cfg, p, frames))


def _check_frames(cfg: ModelConfig, frames: Tensor) -> Tensor:
    if frames.ndim != 5 or frames.shape[2] != 3:
        raise DimensionError(f"frames must be [B x] T x 3 x H x W, got {frames.shape}")
    if frames.shape[1] < 1:
        raise DimensionError("need at least one frame")
    Hi, Wi = frames.shape[3:]
    if Hi != cfg.image_size or Wi != cfg.image_size:
        raise ConfigurationError(f"frames are {Hi}x{Wi}, model expects {cfg.image_size}x{cfg.image_size}")
    return frames


def forward(cfg: ModelConfig, params, frames, train: bool = False, rng: np.random.Generator | None = None):
    """Logits for a clip ``T x 3 x H x W`` or batch ``B x T x 3 x H x W``.

    Dropout acts only when ``train`` is set and ``rng`` is given.
    """
    frames = as_tensor(frames)
    single = frames.ndim == 4
    if single:
        frames = ops.reshape(frames, (1,) + frames.shape)
    B, T, _, Hi, Wi = _check_frames(cfg, frames).shape
    feats = backbone(cfg, params, ops.reshape(frames, (B * T, 3, Hi, Wi)))
    logits, bundle = heads(cfg, params, feats, B, T, train=train, rng=rng)
    if single:
        logits = HeadLogits(**{k: _unbatch(v) for k, v in logits.__dict__.items()})
        bundle = AttentionBundle(**{k: (None if v is None else v[0]) for k, v in bundle.__dict__.items()})
    return logits, bundle


def heads(cfg: ModelConfig, p, feats: dict[str, Tensor], B: int, T: int, train: bool = False, rng=None):
    """Descriptors and logits from per-branch maps of shape ``BT x K x h x w``."""
    drop_rng = rng if train else None
    h = w = cfg.feature_size
    K = cfg.K

    def channels_last(f):
        return ops.transpose(ops.reshape(f, (B, T, K, h, w)), (0, 1, 3, 4, 2))

    routes: dict[str, Tensor] = {}
    bundle = AttentionBundle()
    noun_raw = None
    if "obj" in cfg.branches:
        A_obj = p["head.B_obj"] if cfg.dictionary == "cam" else p["dict.A_obj"]
        cap = pooling.object_descriptor(channels_last(feats["obj"]), A_obj, p["head.B_obj"], batch_dims=1)
        pooled = _dropout(cap.pooled, cfg.dropout, drop_rng)
        routes["obj"] = ops.matmul(pooled, p["head.W_obj_act"])
        if cfg.noun_from == "obj":
            noun_raw = ops.matmul(pooled, p["head.B_obj"])
        bundle.obj = cap.attention.data.reshape(B, T, h, w)
    if "ctx" in cfg.branches:
        A_ctx = p["head.B_ctx"] if cfg.dictionary == "cam" else p["dict.A_ctx"]
        ctx = pooling.context_descriptor(channels_last(feats["ctx"]), A_ctx, p["head.B_ctx"], batch_dims=1)
        pooled = _dropout(ctx.pooled, cfg.dropout, drop_rng)
        routes["ctx"] = ops.matmul(pooled, p["head.B_ctx"])
        if cfg.noun_from == "ctx":
            noun_raw = ops.matmul(pooled, p["head.W_ctx_noun"])
        bundle.ctx = ctx.attention.data.reshape(B, T, h, w)
    seq = lsta.encode_sequence(ops.reshape(feats["act"], (B, T, K, h, w)), _lsta_params(cfg, p), cfg.flags,
                               channels_first=True, batch_dims=1)
    d_act = _dropout(seq.d_act, cfg.dropout, drop_rng)
    routes["act"] = ops.matmul(d_act, p["head.W_act_action"])
    verb_raw = ops.matmul(d_act, p["head.W_act_verb"])
    if cfg.noun_from == "act":
        noun_raw = ops.matmul(d_act, p["head.W_act_noun"])
    bundle.act = seq.attention.data
    if seq.memory_attention is not None:
        bundle.mem = seq.memory_attention.data

    action = ops.scale(_sum_all(list(routes.values())), 1.0 / len(routes))
    verb, noun = verb_raw, noun_raw
    if cfg.bias_control:
        verb = ops.add(verb, ops.matmul(action, p["head.U_v"]))
        noun = ops.add(noun, ops.matmul(action, p["head.U_n"]))
    logits = HeadLogits(verb=verb, noun=noun, action=action, routes=routes, verb_raw=verb_raw, noun_raw=noun_raw)
    return logits, bundle


def _sum_all(ts):
    out = ts[0]
    for t in ts[1:]:
        out = ops.add(out, t)
    return out


def _unbatch(v):
    if v is None:
        return None
    if isinstance(v, dict):
        return {k: _unbatch(x) for k, x in v.items()}
    return ops.reshape(v, v.shape[1:])


def _check_labels(labels, counts):
    out = []
    for lab, n, name in zip(labels, counts, ("verb", "noun", "action")):
        arr = np.atleast_1d(np.asarray(lab))
        if not np.issubdtype(arr.dtype, np.integer):
            raise InputError(f"{name} labels must be integers")
        if arr.size and (arr.min() < 0 or arr.max() >= n):
            raise InputError(f"{name} label out of range [0, {n})")
        out.append(arr.astype(np.int64))
    return out


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean softmax cross-entropy over the batch (``logits`` is ``[B x] classes``)."""
    lp = ops.log_softmax(logits, axis=-1)
    if lp.ndim == 1:
        lp = ops.reshape(lp, (1,) + lp.shape)
    picked = ops.take_along(lp, labels.reshape(-1, 1), axis=-1)
    return ops.scale(ops.sum(picked), -1.0 / labels.shape[0])


def supervision_mask(regime: str) -> tuple[float, float, float]:
    """Loss weights ``(verb, noun, action)`` for a supervision regime."""
    try:
        return REGIMES[regime]
    except KeyError:
        raise ConfigurationError(f"unknown supervision regime {regime!r}; choose from {list(REGIMES)}") from None


def multitask_loss(logits: HeadLogits, labels, weights=(1.0, 1.0, 1.0)) -> Tensor:
    """Weighted sum of verb, noun and action cross-entropies (batch mean)."""
    counts = (logits.verb.shape[-1], logits.noun.shape[-1], logits.action.shape[-1])
    v, n, a = _check_labels(labels, counts)
    terms = []
    for wgt, lg, lab in zip(weights, (logits.verb, logits.noun, logits.action), (v, n, a)):
        if wgt:
            ce = cross_entropy(lg, lab)
            terms.append(ce if wgt == 1.0 else ops.scale(ce, wgt))
    if not terms:
        raise ConfigurationError("supervision regime disables every loss term")
    return _sum_all(terms)


def pair_action(verb_pred, noun_pred, pair_index: dict[tuple[int, int], int]) -> np.ndarray:
    """Action index of each predicted (verb, noun) pair, -1 where the pair is invalid."""
    v = np.atleast_1d(np.asarray(verb_pred))
    n = np.atleast_1d(np.asarray(noun_pred))
    return np.array([pair_index.get((int(a), int(b)), -1) for a, b in zip(v, n)], dtype=np.int64)


class EgoACO:
    """Configuration plus named parameters, with forward and checkpoint helpers."""

    def __init__(self, config: ModelConfig, params: dict[str, Tensor]):
        check_params(config, params)
        self.config = config
        self.params = dict(params)

    @classmethod
    def create(cls, config: ModelConfig, seed: int = 0) -> "EgoACO":
        return cls(config, init_params(config, seed))

    def __call__(self, frames, train=False, rng=None, params=None):
        return forward(self.config, self.params if params is None else params, frames, train=train, rng=rng)

    def state_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}
