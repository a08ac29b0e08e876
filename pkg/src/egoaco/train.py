"""SGD with momentum, staged freezing, two-sequence evaluation and checkpoints."""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np

from egoaco import archive, data, model
from egoaco.ops import ConfigurationError, InputError
from egoaco.tensor import DimensionError, Tape, Tensor


class CheckpointError(ValueError):
    """Checkpoint file is unreadable or lacks a parameter."""


# ---------------------------------------------------------------- optimiser

@dataclass
class OptimState:
    velocity: dict[str, np.ndarray]
    momentum: float = 0.9
    weight_decay: float = 5e-4

    @classmethod
    def zeros(cls, params, momentum: float = 0.9, weight_decay: float = 5e-4) -> "OptimState":
        return cls({k: np.zeros(v.shape) for k, v in params.items()}, momentum, weight_decay)


def sgd_step(params: dict[str, Tensor], grads: dict[str, np.ndarray], state: OptimState, lr: float) -> dict[str, Tensor]:
    """Apply ``v = m v + g + wd p; p -= lr v`` to every parameter in ``grads``.

    Parameters without a gradient are returned untouched and keep their velocity.
    """
    out = dict(params)
    for name, g in grads.items():
        p = params[name].data
        g = np.asarray(g.data if isinstance(g, Tensor) else g, dtype=np.float64)
        v = state.velocity.get(name)
        if v is None:
            v = np.zeros(p.shape)
        if g.shape != p.shape or v.shape != p.shape:
            raise DimensionError(f"sgd_step: {name} has shape {p.shape}, gradient {g.shape}, velocity {v.shape}")
        v = state.momentum * v + (g + state.weight_decay * p)
        state.velocity[name] = v
        out[name] = Tensor(p - lr * v, copy=False)
    return out


def cosine_lr(epoch: float, total_epochs: int, lr0: float) -> float:
    if total_epochs <= 0:
        return lr0
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * epoch / total_epochs))


@dataclass(frozen=True)
class Stage:
    epochs: int
    lr0: float
    trainable: tuple[str, ...]

    def __post_init__(self):
        object.__setattr__(self, "trainable", tuple(self.trainable))
        if self.epochs < 0 or self.lr0 < 0:
            raise ConfigurationError("stage epochs and lr0 must be >= 0")

    def is_trainable(self, name: str) -> bool:
        return any(name.startswith(p) for p in self.trainable)


@dataclass(frozen=True)
class StagePlan:
    stages: tuple[Stage, ...]

    def __post_init__(self):
        object.__setattr__(self, "stages", tuple(
            s if isinstance(s, Stage) else Stage(**s) for s in self.stages))
        if not self.stages:
            raise ConfigurationError("stage plan is empty")

    @classmethod
    def default(cls, epochs=(20, 20, 10), lrs=(1e-2, 1e-2, 1e-4)) -> "StagePlan":
        heads = ("dict.", "head.", "lsta.")
        groups = (heads, heads + ("branch.",), heads + ("branch.", "trunk."))
        return cls(tuple(Stage(e, lr, g) for e, lr, g in zip(epochs, lrs, groups)))

    @property
    def total_epochs(self) -> int:
        return sum(s.epochs for s in self.stages)

    def to_list(self) -> list[dict]:
        return [{"epochs": s.epochs, "lr0": s.lr0, "trainable": list(s.trainable)} for s in self.stages]


@dataclass(frozen=True)
class TrainConfig:
    T: int = 8
    batch_size: int = 8
    regime: str = "V+N+A"
    momentum: float = 0.9
    weight_decay: float = 5e-4
    augment: bool = False
    eval_each_epoch: bool = False

    def __post_init__(self):
        model.supervision_mask(self.regime)
        if self.T < 1 or self.batch_size < 1:
            raise ConfigurationError("T and batch_size must be >= 1")


# ---------------------------------------------------------------- metrics

@dataclass
class Metrics:
    verb_top1: float
    verb_top5: float
    noun_top1: float
    noun_top5: float
    action_top1: float
    action_top5: float
    loss: float = float("nan")
    count: int = 0
    loss_trace: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        keys = ("verb_top1", "verb_top5", "noun_top1", "noun_top5", "action_top1", "action_top5", "loss")
        return {k: getattr(self, k) for k in keys}


def topk_hits(scores: np.ndarray, labels: np.ndarray, k: int) -> np.ndarray:
    """Whether each label is among the ``k`` highest scores (stable, ties to lower index)."""
    k = min(k, scores.shape[-1])
    order = np.argsort(-scores, axis=-1, kind="stable")[:, :k]
    return (order == labels[:, None]).any(axis=1)


def _log_softmax(x: np.ndarray) -> np.ndarray:
    m = x.max(axis=-1, keepdims=True)
    return x - m - np.log(np.exp(x - m).sum(axis=-1, keepdims=True))


def score_logits(verb: np.ndarray, noun: np.ndarray, action: np.ndarray, labels: np.ndarray,
                 regime: str, pairs) -> Metrics:
    """Top-1/top-5 per head for ``n x classes`` logits and ``n x 3`` labels.

    Without action supervision the action prediction pairs the argmax verb and
    noun (an invalid pair counts as wrong); top-5 ranks valid pairs by the sum
    of verb and noun log-probabilities.
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1, 3)
    n = labels.shape[0]
    if n == 0:
        return Metrics(*(float("nan"),) * 6, count=0)
    hits = {}
    for head, lg, lab in (("verb", verb, labels[:, 0]), ("noun", noun, labels[:, 1])):
        hits[head + "_top1"] = topk_hits(lg, lab, 1).mean()
        hits[head + "_top5"] = topk_hits(lg, lab, 5).mean()
    if model.supervision_mask(regime)[2] == 0.0:
        idx = data.pair_index(pairs)
        pred = model.pair_action(verb.argmax(axis=1), noun.argmax(axis=1), idx)
        pv, pn = np.array(pairs).T
        pair_scores = _log_softmax(verb)[:, pv] + _log_softmax(noun)[:, pn]
        hits["action_top1"] = (pred == labels[:, 2]).mean()
        hits["action_top5"] = topk_hits(pair_scores, labels[:, 2], 5).mean()
    else:
        hits["action_top1"] = topk_hits(action, labels[:, 2], 1).mean()
        hits["action_top5"] = topk_hits(action, labels[:, 2], 5).mean()
    return Metrics(**{k: float(v) for k, v in hits.items()}, count=n)


# ---------------------------------------------------------------- evaluation

def eval_logits(net: model.EgoACO, dataset: data.Dataset, split: str, T: int, batch_size: int = 8):
    """Per-clip logits averaged over the centre and first-frame samplings."""
    L = dataset.clip_length
    center = data.segment_indices(L, T, "eval_center")
    first = data.segment_indices(L, T, "eval_first")
    n = len(dataset.entries(split))
    outs = {"verb": [], "noun": [], "action": []}
    for s in range(0, n, batch_size):
        ids = range(s, min(n, s + batch_size))
        frames = np.stack([dataset.frames(split, i, center) for i in ids]
                          + [dataset.frames(split, i, first) for i in ids])
        lg, _ = net(frames)
        b = len(ids)
        for head in outs:
            arr = getattr(lg, head).data
            outs[head].append(0.5 * (arr[:b] + arr[b:]))
    cfg = net.config
    empty = {"verb": cfg.num_verbs, "noun": cfg.num_nouns, "action": cfg.num_actions}
    return {h: (np.concatenate(v) if v else np.zeros((0, empty[h]))) for h, v in outs.items()}


def evaluate(net: model.EgoACO, dataset: data.Dataset, T: int = 8, split: str = "val",
             regime: str = "V+N+A", batch_size: int = 8) -> Metrics:
    logits = eval_logits(net, dataset, split, T, batch_size)
    labels = dataset.labels(split)
    m = score_logits(logits["verb"], logits["noun"], logits["action"], labels, regime, dataset.pairs)
    if labels.shape[0]:
        lt = model.HeadLogits(*(Tensor(logits[h], copy=False) for h in ("verb", "noun", "action")))
        m.loss = float(model.multitask_loss(lt, labels.T, model.supervision_mask(regime)).item())
    return m


# ---------------------------------------------------------------- training

def _freeze_level(trainable: list[str], cfg: TrainConfig) -> str | None:
    """Deepest frozen block whose outputs can be cached across epochs."""
    if cfg.augment or any(k.startswith("trunk.") for k in trainable):
        return None
    if any(k.startswith("branch.") for k in trainable):
        return "trunk"
    return "branches"


class FeatureCache:
    """Outputs of frozen layers per (clip, frame), valid while those layers stay frozen."""

    def __init__(self, net_cfg: model.ModelConfig, level: str):
        self.cfg = net_cfg
        self.level = level
        self.store: dict[tuple[int, int], dict[str, np.ndarray] | np.ndarray] = {}

    def features(self, params, dataset: data.Dataset, split: str, clip_ids, frame_idx: np.ndarray):
        missing = [(c, int(t)) for c, row in zip(clip_ids, frame_idx) for t in row if (c, int(t)) not in self.store]
        missing = list(dict.fromkeys(missing))
        if missing:
            by_clip: dict[int, list[int]] = {}
            for c, t in missing:
                by_clip.setdefault(c, []).append(t)
            frames = np.concatenate([dataset.frames(split, c, ts) for c, ts in by_clip.items()])
            x = model.trunk(self.cfg, params, Tensor(frames, copy=False))
            out = model.branches(self.cfg, params, x) if self.level == "branches" else {"trunk": x}
            for k, key in enumerate(missing):
                self.store[key] = {name: f.data[k] for name, f in out.items()}
        keys = [(c, int(t)) for c, row in zip(clip_ids, frame_idx) for t in row]
        names = self.store[keys[0]].keys()
        return {name: Tensor(np.stack([self.store[k][name] for k in keys]), copy=False) for name in names}


def _batch_features(net_cfg, params, dataset, clip_ids, frame_idx, cache, aug_rng):
    if cache is not None:
        feats = cache.features(params, dataset, "train", clip_ids, frame_idx)
        if cache.level == "trunk":
            feats = model.branches(net_cfg, params, feats["trunk"])
        return feats
    clips = [dataset.frames("train", c, row) for c, row in zip(clip_ids, frame_idx)]
    if aug_rng is not None:
        clips = [data.augment(f, aug_rng) for f in clips]
    frames = np.concatenate(clips)
    return model.backbone(net_cfg, params, Tensor(frames, copy=False))


def train_staged(plan: StagePlan, net: model.EgoACO, dataset: data.Dataset, seed: int,
                 cfg: TrainConfig = TrainConfig(), log=None, metrics_path=None):
    """Train stage by stage; returns ``(model, records)`` with one record per epoch.

    Every random choice of epoch ``e`` (shuffle, frame sampling, augmentation,
    dropout) comes from a generator seeded by ``(seed, e)``.
    """
    n = len(dataset.entries("train"))
    if n == 0:
        raise InputError("training split is empty")
    if dataset.num_actions != net.config.num_actions or dataset.num_verbs != net.config.num_verbs \
            or dataset.num_nouns != net.config.num_nouns:
        raise ConfigurationError("dataset class counts do not match the model configuration")
    weights = model.supervision_mask(cfg.regime)
    labels = dataset.labels("train")
    params = dict(net.params)
    state = OptimState.zeros(params, cfg.momentum, cfg.weight_decay)
    records = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path is not None else None
    global_epoch = 0
    try:
        for s_idx, stage in enumerate(plan.stages):
            names = [k for k in params if stage.is_trainable(k)]
            level = _freeze_level(names, cfg)
            cache = FeatureCache(net.config, level) if level and stage.epochs else None
            for e in range(stage.epochs):
                lr = cosine_lr(e, stage.epochs, stage.lr0)
                rng = np.random.default_rng(np.random.SeedSequence([int(seed), global_epoch]))
                order = rng.permutation(n)
                losses, outs = [], {"verb": [], "noun": [], "action": []}
                for b0 in range(0, n, cfg.batch_size):
                    ids = [int(i) for i in order[b0:b0 + cfg.batch_size]]
                    frame_idx = np.stack([data.segment_indices(dataset.clip_length, cfg.T, "train", rng) for _ in ids])
                    with Tape() as tape:
                        tracked = {k: Tensor(params[k].data, copy=False) for k in names}
                        tape.watch(*tracked.values())
                        live = {**params, **tracked}
                        feats = _batch_features(net.config, live, dataset, ids, frame_idx, cache,
                                                rng if cfg.augment else None)
                        logits, _ = model.heads(net.config, live, feats, len(ids), cfg.T, train=True, rng=rng)
                        loss = model.multitask_loss(logits, labels[ids].T, weights)
                    grads = tape.gradient(loss, list(tracked.values())) if names else []
                    params = sgd_step(params, {k: g.data for k, g in zip(names, grads)}, state, lr)
                    losses.append(loss.item() * len(ids))
                    for h in outs:
                        outs[h].append(getattr(logits, h).data)
                m = score_logits(*(np.concatenate(outs[h]) for h in ("verb", "noun", "action")),
                                 labels[order], cfg.regime, dataset.pairs)
                rec = {"stage": s_idx + 1, "epoch": global_epoch, "lr": lr, "loss": sum(losses) / n,
                       **{k: v for k, v in m.as_dict().items() if k != "loss"}}
                if cfg.eval_each_epoch and dataset.entries("val"):
                    vm = evaluate(model.EgoACO(net.config, params), dataset, cfg.T, "val", cfg.regime)
                    rec.update({f"val_{k}": v for k, v in vm.as_dict().items()})
                records.append(rec)
                if sink is not None:
                    sink.write(json.dumps(rec, sort_keys=False) + "\n")
                    sink.flush()
                if log is not None:
                    log(rec)
                global_epoch += 1
    finally:
        if sink is not None:
            sink.close()
    return model.EgoACO(net.config, params), records


# ---------------------------------------------------------------- checkpoints

def checkpoint_save(path, net: model.EgoACO) -> None:
    archive.save(path, net.state_arrays())


def checkpoint_load(path, config: model.ModelConfig) -> model.EgoACO:
    """Load parameters for ``config``; names are audited, then shapes."""
    try:
        arrays = archive.load(path)
    except archive.ArchiveError as exc:
        raise CheckpointError(str(exc)) from exc
    expected = model.parameter_shapes(config)
    for name in expected:
        if name not in arrays:
            raise CheckpointError(f"{os.fspath(path)}: missing parameter {name!r}")
    extra = sorted(set(arrays) - set(expected))
    if extra:
        raise ConfigurationError(f"{os.fspath(path)}: parameters {extra} are not part of this configuration")
    for name, shape in expected.items():
        if arrays[name].shape != shape:
            raise ConfigurationError(
                f"{os.fspath(path)}: parameter {name!r} has shape {arrays[name].shape}, configuration expects {shape}")
    return model.EgoACO(config, {k: Tensor(arrays[k], copy=False) for k in expected})


def read_metrics(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]

