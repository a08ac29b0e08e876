"""Strict JSON run configuration: model, training, stage plan, data and seed."""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field, fields

from egoaco import data as _data
from egoaco import model as _model
from egoaco import train as _train
from egoaco.ops import ConfigurationError, InputError

_SECTIONS = ("seed", "model", "train", "plan", "data")


def _strict(cls, raw, where: str):
    if raw is None:
        return cls()
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{where} must be an object")
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise ConfigurationError(f"{where}: unknown keys {unknown}")
    try:
        return cls(**raw)
    except TypeError as exc:
        raise ConfigurationError(f"{where}: {exc}") from exc


def _data_config(raw) -> _data.DataConfig:
    raw = dict(raw or {})
    gen = raw.pop("generator", None)
    cfg = _strict(_data.DataConfig, raw, "data")
    if gen is not None:
        cfg = _data.DataConfig(**{**{f.name: getattr(cfg, f.name) for f in fields(cfg)},
                                 "generator": _strict(_data.GeneratorConfig, gen, "data.generator")})
    return cfg


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    model: _model.ModelConfig = field(default_factory=_model.ModelConfig)
    train: _train.TrainConfig = field(default_factory=_train.TrainConfig)
    plan: _train.StagePlan = field(default_factory=_train.StagePlan.default)
    data: _data.DataConfig = field(default_factory=_data.DataConfig)

    def to_dict(self) -> dict:
        d = asdict(self.data)
        d["pairs"] = [list(p) for p in self.data.pairs]
        return {"seed": self.seed, "model": self.model.to_dict(), "train": asdict(self.train),
                "plan": self.plan.to_list(), "data": d}

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def from_dict(raw: dict) -> RunConfig:
    """Validate a parsed JSON object; class counts default to the data's tables."""
    if not isinstance(raw, dict):
        raise ConfigurationError("configuration must be a JSON object")
    unknown = sorted(set(raw) - set(_SECTIONS))
    if unknown:
        raise ConfigurationError(f"unknown top-level keys {unknown}")
    seed = raw.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool) or seed < 0:
        raise ConfigurationError("seed must be a non-negative integer")
    try:
        dcfg = _data_config(raw.get("data"))
    except InputError as exc:
        raise InputError(f"data: {exc}") from exc
    mraw = dict(raw.get("model") or {})
    counts = {"num_verbs": dcfg.num_verbs, "num_nouns": dcfg.num_nouns, "num_actions": len(dcfg.pairs)}
    for key, value in counts.items():
        mraw.setdefault(key, value)
    mcfg = _strict(_model.ModelConfig, mraw, "model")
    for key, value in counts.items():
        if getattr(mcfg, key) != value:
            raise ConfigurationError(f"model.{key}={getattr(mcfg, key)} but the data defines {value}")
    tcfg = _strict(_train.TrainConfig, raw.get("train"), "train")
    plan_raw = raw.get("plan")
    if plan_raw is None:
        plan = _train.StagePlan.default()
    else:
        if not isinstance(plan_raw, list):
            raise ConfigurationError("plan must be a list of stages")
        plan = _train.StagePlan(tuple(_strict(_train.Stage, s, f"plan[{i}]") for i, s in enumerate(plan_raw)))
    return RunConfig(seed, mcfg, tcfg, plan, dcfg)


def load(path) -> RunConfig:
    path = os.fspath(path)
    try:
        with open(path, encoding="utf-8") as fh:
            raw = json.load(fh)
    except OSError as exc:
        raise InputError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"{path}: invalid JSON ({exc})") from exc
    return from_dict(raw)


def model_config_from_manifest(cfg: _model.ModelConfig, manifest: dict) -> _model.ModelConfig:
    """Check (and default) a model's class counts against a dataset manifest."""
    counts = {"num_verbs": len(manifest["verbs"]), "num_nouns": len(manifest["nouns"]),
              "num_actions": len(manifest["pairs"])}
    for key, value in counts.items():
        if getattr(cfg, key) != value:
            raise ConfigurationError(f"model.{key}={getattr(cfg, key)} but the dataset defines {value}")
    return cfg
