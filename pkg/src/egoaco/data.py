"""Synthetic structured-label clips and TSN-style frame sampling.

A clip shows one blob over a grey textured background.  The blob's colour
encodes the noun (disks for the first four nouns, squares for the rest), its
trajectory encodes the verb, and the background grating is drawn from the
action's texture with probability ``context_prob`` (otherwise from a random
action), so it is a correlated but unreliable cue.  Every frame is a pure function of ``(seed, verb, noun, t)``:
frames can be rendered on demand without generating the whole clip.
"""
from __future__ import annotations

import json
import os
from dataclasses import asdict, dataclass, field

import numpy as np

from egoaco import archive
from egoaco.ops import InputError

GENERATOR_VERSION = 1

VERBS = ("static", "translate_right", "translate_down", "oscillate", "grow", "orbit")
NOUNS = ("red_disk", "green_disk", "blue_disk", "yellow_disk",
         "magenta_square", "cyan_square", "white_square", "black_square")
# 12 valid (verb, noun) pairs out of 48; every verb takes two nouns, every noun appears
DEFAULT_PAIRS = ((0, 0), (0, 5), (1, 1), (1, 6), (2, 2), (2, 7),
                 (3, 3), (3, 4), (4, 0), (4, 2), (5, 1), (5, 3))

# corners of the RGB cube: every noun colour points a different way from the grey background
_COLORS = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0], [1.0, 1.0, 0.0],
                    [1.0, 0.0, 1.0], [0.0, 1.0, 1.0], [1.0, 1.0, 1.0], [0.0, 0.0, 0.0]])


@dataclass(frozen=True)
class GeneratorConfig:
    clip_length: int = 64
    image_size: int = 32
    noise: float = 0.05
    context_prob: float = 0.8

    def __post_init__(self):
        if self.clip_length < 1 or self.image_size < 16:
            raise InputError("clip_length must be >= 1 and image_size >= 16")
        if not 0.0 <= self.context_prob <= 1.0:
            raise InputError("context_prob must be in [0, 1]")
        if self.noise < 0:
            raise InputError("noise must be >= 0")


@dataclass(frozen=True)
class DataConfig:
    """What ``build_dataset`` needs; the manifest records its expansion."""
    train_clips: int = 600
    val_clips: int = 200
    seed: int = 0
    pairs: tuple[tuple[int, int], ...] = DEFAULT_PAIRS
    num_verbs: int = len(VERBS)
    num_nouns: int = len(NOUNS)
    generator: GeneratorConfig = field(default_factory=GeneratorConfig)

    def __post_init__(self):
        object.__setattr__(self, "pairs", tuple(tuple(int(x) for x in p) for p in self.pairs))
        if isinstance(self.generator, dict):
            object.__setattr__(self, "generator", GeneratorConfig(**self.generator))
        validate_pairs(self.pairs, self.num_verbs, self.num_nouns)
        if self.num_verbs > len(VERBS) or self.num_nouns > len(NOUNS):
            raise InputError(f"generator renders at most {len(VERBS)} verbs and {len(NOUNS)} nouns")
        if self.train_clips < 0 or self.val_clips < 0:
            raise InputError("clip counts must be >= 0")


def validate_pairs(pairs, num_verbs, num_nouns):
    if not pairs:
        raise InputError("pair table is empty")
    seen = set()
    for p in pairs:
        if len(p) != 2:
            raise InputError(f"pair {p!r} is not a (verb, noun) pair")
        v, n = p
        if not (0 <= v < num_verbs and 0 <= n < num_nouns):
            raise InputError(f"pair ({v}, {n}) outside {num_verbs} verbs x {num_nouns} nouns")
        if (v, n) in seen:
            raise InputError(f"duplicate pair ({v}, {n})")
        seen.add((v, n))


@dataclass
class ClipSample:
    frames: np.ndarray  # L x 3 x H x W
    verb_id: int
    noun_id: int
    action_id: int
    seed: int


# ---------------------------------------------------------------- rendering

def _clip_params(seed: int, verb: int, noun: int, action: int, num_actions: int, cfg: GeneratorConfig):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x5EED]))
    S = cfg.image_size
    radius = rng.uniform(0.09, 0.15) * S
    travel = 0.4 * S
    margin = 0.2 * S
    if rng.random() < cfg.context_prob:
        ctx = action
    else:
        ctx = int(rng.integers(num_actions))
    return {
        "radius": radius,
        "x0": rng.uniform(margin, S - margin - (travel if verb == 1 else 0.0)),
        "y0": rng.uniform(margin, S - margin - (travel if verb == 2 else 0.0)),
        "phase": rng.uniform(0, 2 * np.pi),
        "travel": travel,
        "context": ctx,
        "tex_phase": rng.uniform(0, 2 * np.pi),
    }


def blob_state(verb: int, t: np.ndarray, L: int, p: dict, S: int):
    """Centre ``(cx, cy)`` and radius of the blob at frame indices ``t``."""
    tau = t / max(L - 1, 1)
    cx = np.full(tau.shape, p["x0"])
    cy = np.full(tau.shape, p["y0"])
    r = np.full(tau.shape, p["radius"])
    amp = 0.15 * S
    if verb == 1:
        cx = p["x0"] + p["travel"] * tau
    elif verb == 2:
        cy = p["y0"] + p["travel"] * tau
    elif verb == 3:
        cx = p["x0"] + amp * np.sin(4 * np.pi * tau + p["phase"])
    elif verb == 4:
        # pulsing radius over the same range the other verbs draw from
        r = S * (0.09 + 0.06 * (0.5 - 0.5 * np.cos(2 * np.pi * tau + p["phase"])))
    elif verb == 5:
        cx = p["x0"] + amp * np.cos(2 * np.pi * tau + p["phase"])
        cy = p["y0"] + amp * np.sin(2 * np.pi * tau + p["phase"])
    return cx, cy, r


def _background(ctx: int, num_actions: int, p: dict, S: int) -> np.ndarray:
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    theta = np.pi * ctx / num_actions
    freq = 2.0 + (ctx % 3)
    wave = np.sin(2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta)) / S + p["tex_phase"])
    return np.broadcast_to((0.5 + 0.12 * wave)[None], (3, S, S))


def render_frames(seed: int, verb: int, noun: int, action: int, indices, num_actions: int,
                  cfg: GeneratorConfig = GeneratorConfig()) -> np.ndarray:
    """Render frames ``indices`` of a clip as ``len(indices) x 3 x S x S``."""
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    L, S = cfg.clip_length, cfg.image_size
    if idx.size and (idx.min() < 0 or idx.max() >= L):
        raise InputError(f"frame index out of range [0, {L})")
    p = _clip_params(seed, verb, noun, action, num_actions, cfg)
    bg = _background(p["context"], num_actions, p, S)
    cx, cy, r = blob_state(verb, idx.astype(np.float64), L, p, S)
    yy, xx = np.mgrid[0:S, 0:S].astype(np.float64)
    color = _COLORS[noun][:, None, None]
    out = np.empty((idx.size, 3, S, S))
    for k, t in enumerate(idx):
        dx, dy = xx + 0.5 - cx[k], yy + 0.5 - cy[k]
        if noun < 4:
            mask = (dx * dx + dy * dy) <= r[k] * r[k]
        else:
            mask = (np.abs(dx) <= r[k]) & (np.abs(dy) <= r[k])
        frame = np.where(mask[None], color, bg)
        if cfg.noise:
            nrng = np.random.default_rng(np.random.SeedSequence([int(seed), int(t), 0xF00D]))
            frame = frame + cfg.noise * nrng.standard_normal(frame.shape)
        out[k] = frame
    return out


def pair_index(pairs) -> dict[tuple[int, int], int]:
    return {tuple(p): i for i, p in enumerate(pairs)}


def generate_clip(seed: int, verb_id: int, noun_id: int, pairs=DEFAULT_PAIRS,
                  cfg: GeneratorConfig = GeneratorConfig()) -> ClipSample:
    table = pair_index(pairs)
    if (verb_id, noun_id) not in table:
        raise InputError(f"({verb_id}, {noun_id}) is not a valid verb-noun pair")
    action = table[(verb_id, noun_id)]
    frames = render_frames(seed, verb_id, noun_id, action, np.arange(cfg.clip_length), len(pairs), cfg)
    return ClipSample(frames, verb_id, noun_id, action, seed)


# ---------------------------------------------------------------- sampling

def segment_indices(L: int, T: int, mode: str, rng: np.random.Generator | None = None) -> np.ndarray:
    """One frame index per equal-length segment.

    ``train`` draws uniformly inside each segment, ``eval_center`` takes the
    central frame (the later one for even lengths), ``eval_first`` the first.
    """
    if T < 1:
        raise InputError("T must be >= 1")
    if L < T:
        raise InputError(f"clip of {L} frames cannot be split into {T} segments")
    bounds = (np.arange(T + 1) * L) // T
    start, stop = bounds[:-1], bounds[1:]
    if mode == "train":
        if rng is None:
            raise InputError("train sampling needs an rng")
        return start + (rng.random(T) * (stop - start)).astype(np.int64)
    if mode == "eval_center":
        return start + (stop - start) // 2
    if mode == "eval_first":
        return start.copy()
    raise InputError(f"unknown sampling mode {mode!r}")


def sample_segments(clip: ClipSample, T: int, mode: str, rng=None) -> np.ndarray:
    return clip.frames[segment_indices(clip.frames.shape[0], T, mode, rng)]


def augment(frames: np.ndarray, rng: np.random.Generator, max_shift: int = 2) -> np.ndarray:
    """Clip-consistent horizontal flip and small random crop (zero-padded shift)."""
    out = frames[..., ::-1] if rng.random() < 0.5 else frames
    dy, dx = rng.integers(-max_shift, max_shift + 1, size=2)
    S = frames.shape[-1]
    padded = np.pad(out, [(0, 0)] * (out.ndim - 2) + [(max_shift, max_shift)] * 2)
    return np.ascontiguousarray(padded[..., max_shift + dy:max_shift + dy + S, max_shift + dx:max_shift + dx + S])


# ---------------------------------------------------------------- manifest / dataset

def make_manifest(cfg: DataConfig) -> dict:
    """Balanced splits: clip ``i`` of a split gets action ``i mod A``."""
    rng = np.random.default_rng(np.random.SeedSequence([int(cfg.seed), 0xDA7A]))
    seeds = rng.choice(2 ** 31, size=cfg.train_clips + cfg.val_clips, replace=False)
    splits = {}
    offset = 0
    for name, count in (("train", cfg.train_clips), ("val", cfg.val_clips)):
        entries = []
        for i in range(count):
            v, n = cfg.pairs[i % len(cfg.pairs)]
            entries.append({"seed": int(seeds[offset + i]), "verb": int(v), "noun": int(n)})
        splits[name] = entries
        offset += count
    return {
        "version": GENERATOR_VERSION,
        "verbs": list(VERBS[: cfg.num_verbs]),
        "nouns": list(NOUNS[: cfg.num_nouns]),
        "pairs": [list(p) for p in cfg.pairs],
        "splits": splits,
        "generator": asdict(cfg.generator),
    }


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def clip_filename(seed: int) -> str:
    return f"clip_{seed}.bin"


def build_dataset(cfg: DataConfig, out_dir) -> dict:
    """Write ``manifest.json`` and one archive per clip; returns the manifest."""
    manifest = make_manifest(cfg)
    out_dir = os.fspath(out_dir)
    try:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "manifest.json"), "w", encoding="utf-8") as fh:
            fh.write(_dump_json(manifest))
    except OSError as exc:
        raise OSError(f"cannot write dataset into {out_dir}: {exc.strerror}") from exc
    ds = Dataset(manifest)
    for split in ("train", "val"):
        for i in range(len(ds.entries(split))):
            clip = ds.clip(split, i)
            archive.save(os.path.join(out_dir, clip_filename(clip.seed)), {
                "frames": clip.frames,
                "labels": np.array([clip.verb_id, clip.noun_id, clip.action_id], dtype=np.float64),
            })
    return manifest


def load_manifest(path) -> dict:
    path = os.fspath(path)
    if os.path.isdir(path):
        path = os.path.join(path, "manifest.json")
    try:
        with open(path, encoding="utf-8") as fh:
            manifest = json.load(fh)
    except OSError as exc:
        raise OSError(f"cannot read manifest {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: manifest is not valid JSON ({exc})") from exc
    for key in ("version", "verbs", "nouns", "pairs", "splits"):
        if key not in manifest:
            raise InputError(f"{path}: manifest lacks {key!r}")
    validate_pairs([tuple(p) for p in manifest["pairs"]], len(manifest["verbs"]), len(manifest["nouns"]))
    return manifest


class Dataset:
    """Clips described by a manifest, read from ``root`` or rendered on demand."""

    def __init__(self, manifest: dict, root=None):
        self.manifest = manifest
        self.root = None if root is None else os.fspath(root)
        self.pairs = [tuple(p) for p in manifest["pairs"]]
        self.pair_index = pair_index(self.pairs)
        self.generator = GeneratorConfig(**manifest.get("generator", {}))
        self._cache: dict[int, np.ndarray] = {}
        for split in ("train", "val"):
            for e in manifest["splits"].get(split, []):
                if (e["verb"], e["noun"]) not in self.pair_index:
                    raise InputError(f"manifest entry {e} is not a valid pair")

    @classmethod
    def from_dir(cls, root) -> "Dataset":
        return cls(load_manifest(root), root)

    @classmethod
    def synthetic(cls, cfg: DataConfig = DataConfig()) -> "Dataset":
        return cls(make_manifest(cfg))

    @property
    def num_verbs(self) -> int:
        return len(self.manifest["verbs"])

    @property
    def num_nouns(self) -> int:
        return len(self.manifest["nouns"])

    @property
    def num_actions(self) -> int:
        return len(self.pairs)

    @property
    def clip_length(self) -> int:
        return self.generator.clip_length

    def entries(self, split: str) -> list[dict]:
        return self.manifest["splits"].get(split, [])

    def labels(self, split: str) -> np.ndarray:
        """``n x 3`` array of (verb, noun, action)."""
        es = self.entries(split)
        return np.array([[e["verb"], e["noun"], self.pair_index[(e["verb"], e["noun"])]] for e in es],
                        dtype=np.int64).reshape(-1, 3)

    def _load(self, seed: int) -> np.ndarray:
        frames = self._cache.get(seed)
        if frames is None:
            path = os.path.join(self.root, clip_filename(seed))
            frames = archive.load(path)["frames"]
            self._cache[seed] = frames
        return frames

    def frames(self, split: str, i: int, indices) -> np.ndarray:
        e = self.entries(split)[i]
        if self.root is not None:
            return self._load(e["seed"])[np.asarray(indices)]
        a = self.pair_index[(e["verb"], e["noun"])]
        return render_frames(e["seed"], e["verb"], e["noun"], a, indices, self.num_actions, self.generator)

    def clip(self, split: str, i: int) -> ClipSample:
        e = self.entries(split)[i]
        a = self.pair_index[(e["verb"], e["noun"])]
        frames = self.frames(split, i, np.arange(self.clip_length))
        return ClipSample(frames, e["verb"], e["noun"], a, e["seed"])
