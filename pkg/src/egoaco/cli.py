"""``egoaco`` command line: synth, train, eval, ablate, gradcheck, export-attention.

Exit codes: 0 success, 1 internal failure or failed check, 2 invalid user input.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from dataclasses import replace

import numpy as np

from egoaco import archive, checks, config, data, kernels, model, train
from egoaco.lsta import AblationVariant
from egoaco.ops import ConfigurationError, InputError
from egoaco.tensor import DimensionError

USER_ERRORS = (ConfigurationError, InputError, DimensionError, train.CheckpointError, archive.ArchiveError, OSError)

CHECKPOINT = "checkpoint.bin"
CONFIG = "config.json"
METRICS = "metrics.jsonl"


class UsageError(Exception):
    """Bad command-line arguments (exit code 2)."""


def _load_config(path, seed=None) -> config.RunConfig:
    cfg = config.load(path) if path else config.from_dict({})
    if seed is not None:
        cfg = replace(cfg, seed=seed)
    return cfg


def _dataset(cfg: config.RunConfig, data_dir) -> data.Dataset:
    if data_dir:
        ds = data.Dataset.from_dir(data_dir)
        config.model_config_from_manifest(cfg.model, ds.manifest)
        return ds
    return data.Dataset.synthetic(cfg.data)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _fmt_metrics(m: dict) -> str:
    return "  ".join(f"{k}={v:.4f}" for k, v in m.items())


# ---------------------------------------------------------------- commands

def cmd_synth(args) -> int:
    cfg = _load_config(args.config, args.seed)
    dcfg = cfg.data if args.seed is None else replace(cfg.data, seed=args.seed)
    manifest = data.build_dataset(dcfg, args.out)
    counts = {k: len(v) for k, v in manifest["splits"].items()}
    print(f"wrote {counts.get('train', 0)} train / {counts.get('val', 0)} val clips to {args.out}")
    return 0


def run_training(cfg: config.RunConfig, ds: data.Dataset, out_dir=None, log=None):
    net = model.EgoACO.create(cfg.model, cfg.seed)
    metrics_path = None
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        metrics_path = os.path.join(out_dir, METRICS)
    net, records = train.train_staged(cfg.plan, net, ds, cfg.seed, cfg.train, log=log, metrics_path=metrics_path)
    if out_dir is not None:
        train.checkpoint_save(os.path.join(out_dir, CHECKPOINT), net)
        with open(os.path.join(out_dir, CONFIG), "w", encoding="utf-8") as fh:
            fh.write(cfg.dumps())
    return net, records


def cmd_train(args) -> int:
    cfg = _load_config(args.config, args.seed)
    ds = _dataset(cfg, args.data)
    t0 = time.perf_counter()

    def log(rec):
        if not args.quiet:
            print(f"stage {rec['stage']} epoch {rec['epoch']:3d} lr {rec['lr']:.2e} loss {rec['loss']:.4f} "
                  f"action_top1 {rec['action_top1']:.3f}", flush=True)

    net, _ = run_training(cfg, ds, args.out, log)
    if ds.entries("val"):
        m = train.evaluate(net, ds, cfg.train.T, "val", cfg.train.regime)
        print("val " + _fmt_metrics(m.as_dict()))
    print(f"checkpoint written to {os.path.join(args.out, CHECKPOINT)} ({time.perf_counter() - t0:.1f}s)")
    return 0


def _checkpoint_config(path, config_path=None) -> config.RunConfig:
    if config_path is None:
        config_path = os.path.join(os.path.dirname(os.path.abspath(path)), CONFIG)
        if not os.path.exists(config_path):
            raise InputError(f"no {CONFIG} next to {path}; pass --config")
    return config.load(config_path)


def cmd_eval(args) -> int:
    cfg = _checkpoint_config(args.checkpoint, args.config)
    net = train.checkpoint_load(args.checkpoint, cfg.model)
    ds = _dataset(cfg, args.data)
    m = train.evaluate(net, ds, cfg.train.T, args.split, cfg.train.regime)
    result = {"split": args.split, "clips": m.count, **m.as_dict()}
    print(json.dumps(result))
    if args.json:
        _write_json(args.json, result)
    return 0


def _parse_list(text, kind, what):
    items = [s.strip() for s in text.split(",") if s.strip()]
    if not items:
        raise UsageError(f"{what}: need at least one value")
    try:
        return [kind(s) for s in items]
    except ValueError as exc:
        raise UsageError(f"{what}: {exc}") from None


def ablation_rows(cfg: config.RunConfig, ds: data.Dataset, variants, seeds, dictionary_sizes=(None,), log=None):
    """Train every (variant, D, seed); returns data rows then one mean row per variant."""
    rows, means = [], []
    for variant in variants:
        for D in dictionary_sizes:
            label = variant.name if D is None else f"{variant.name}/D={D}"
            mcfg = replace(cfg.model, variant=variant.name, **({} if D is None else {"D": D}))
            group = []
            for seed in seeds:
                run = replace(cfg, model=mcfg, seed=seed)
                net, _ = run_training(run, ds)
                m = train.evaluate(net, ds, run.train.T, "val", run.train.regime)
                row = {"variant": label, "seed": str(seed), "verb_top1": m.verb_top1,
                       "noun_top1": m.noun_top1, "action_top1": m.action_top1}
                group.append(row)
                if log is not None:
                    log(row)
            rows.extend(group)
            means.append({"variant": label, "seed": "mean",
                          **{k: float(np.mean([r[k] for r in group])) for k in ("verb_top1", "noun_top1", "action_top1")}})
    return rows + means


def cmd_ablate(args) -> int:
    cfg = _load_config(args.config)
    variants = [AblationVariant.parse(v) for v in _parse_list(args.variants, str, "--variants")]
    seeds = _parse_list(args.seeds, int, "--seeds")
    sizes = _parse_list(args.dictionary_sizes, int, "--dictionary-sizes") if args.dictionary_sizes else [None]
    ds = _dataset(cfg, args.data)
    fields = ["variant", "seed", "verb_top1", "noun_top1", "action_top1"]
    out = open(args.out, "w", newline="", encoding="utf-8") if args.out else sys.stdout
    try:
        rows = ablation_rows(cfg, ds, variants, seeds, sizes,
                             log=lambda r: print(f"# {r['variant']} seed {r['seed']} action_top1 {r['action_top1']:.4f}",
                                                 file=sys.stderr, flush=True))
        writer = csv.DictWriter(out, fieldnames=fields, lineterminator="\n")
        writer.writeheader()
        for r in rows:
            writer.writerow({k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()})
    finally:
        if out is not sys.stdout:
            out.close()
    return 0


def cmd_gradcheck(args) -> int:
    seeds = range(args.seeds)
    t0 = time.perf_counter()
    failed = []

    def log(res: checks.CaseResult):
        status = "ok  " if res.passed else "FAIL"
        rep = res.report
        extra = f" selector flips {rep.selector_flips}" if rep.selector_flips else ""
        print(f"{status} {res.name:32s} seed {res.seed:2d} max rel err {rep.max_error:.3e} "
              f"(worst: {rep.worst()}){extra}", flush=True)
        if not res.passed:
            failed.append(res)

    tol = checks.TOLERANCE[args.scope] if args.tol is None else args.tol
    results = checks.run_scope(args.scope, seeds, tol=tol, log=log)
    worst = max((r.report.max_error for r in results), default=0.0)
    print(f"{args.scope}: {len(results) - len(failed)}/{len(results)} passed, max relative error {worst:.3e}, "
          f"tolerance {tol:.0e}, {time.perf_counter() - t0:.1f}s")
    if failed:
        print("failed: " + ", ".join(sorted({r.name for r in failed})))
        return 1
    return 0


def attention_maps(net: model.EgoACO, frames: np.ndarray) -> dict[str, np.ndarray]:
    """Per-route ``T x h x w`` attention for one clip."""
    _, bundle = net(frames)
    return {k: v for k, v in bundle.__dict__.items() if v is not None}


def to_pgm(weights: np.ndarray, lo: float, hi: float) -> bytes:
    """Binary greyscale PGM (P5, maxval 255) of ``weights`` min-max scaled to ``[lo, hi]``."""
    if hi > lo:
        pix = np.rint(255.0 * (weights - lo) / (hi - lo))
    else:
        pix = np.zeros(weights.shape)
    h, w = weights.shape
    return f"P5\n{w} {h}\n255\n".encode("ascii") + np.clip(pix, 0, 255).astype(np.uint8).tobytes()


def cmd_export_attention(args) -> int:
    cfg = _checkpoint_config(args.checkpoint, args.config)
    net = train.checkpoint_load(args.checkpoint, cfg.model)
    if not os.path.isfile(args.clip):
        raise InputError(f"clip file {args.clip} does not exist")
    frames_all = archive.load(args.clip).get("frames")
    if frames_all is None or frames_all.ndim != 4:
        raise InputError(f"{args.clip} holds no L x 3 x H x W 'frames' entry")
    idx = data.segment_indices(frames_all.shape[0], cfg.train.T, "eval_center")
    maps = attention_maps(net, frames_all[idx])
    os.makedirs(args.out, exist_ok=True)
    for route, amap in maps.items():
        T = amap.shape[0]
        with open(os.path.join(args.out, f"{route}.csv"), "w", encoding="utf-8") as fh:
            for t in range(T):
                fh.write(f"{int(idx[t])}," + ",".join(repr(float(v)) for v in amap[t].ravel()) + "\n")
        for t in range(T):
            # the object map is one spatio-temporal softmax, normalised as a whole
            lo, hi = (amap.min(), amap.max()) if route == "obj" else (amap[t].min(), amap[t].max())
            with open(os.path.join(args.out, f"{route}_t{t:02d}.pgm"), "wb") as fh:
                fh.write(to_pgm(amap[t], float(lo), float(hi)))
    print(f"wrote {', '.join(sorted(maps))} attention for {len(idx)} frames to {args.out}")
    return 0


# ---------------------------------------------------------------- entry point

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="egoaco", description="Egocentric action recognition at desk scale.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="build a synthetic dataset")
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train with the staged plan")
    p.add_argument("--config")
    p.add_argument("--data", help="dataset directory (default: render the config's data on the fly)")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="two-sequence evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data")
    p.add_argument("--config", help=f"run config (default: {CONFIG} next to the checkpoint)")
    p.add_argument("--split", default="val", choices=["train", "val"])
    p.add_argument("--json", help="also write the metrics to this file")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train variants over seeds and tabulate top-1 accuracy")
    p.add_argument("--config")
    p.add_argument("--variants", required=True, help="comma-separated, e.g. Baseline,FullLsta")
    p.add_argument("--seeds", required=True, help="comma-separated integers")
    p.add_argument("--dictionary-sizes", help="sweep the memory dictionary size D")
    p.add_argument("--data")
    p.add_argument("--out", help="CSV path (default: stdout)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="central-difference gradient checks")
    p.add_argument("--scope", choices=["ops", "lsta", "full"], default="ops")
    p.add_argument("--seeds", type=int, default=10, help="number of random seeds per case")
    p.add_argument("--tol", type=float, help="max relative error (default 1e-6 for ops and lsta, 1e-5 for full)")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("export-attention", help="write per-frame attention maps as PGM and CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clip", required=True, help="clip archive, e.g. clip_<seed>.bin")
    p.add_argument("--out", required=True)
    p.add_argument("--config")
    p.set_defaults(func=cmd_export_attention)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    kernels.set_threads()
    try:
        return args.func(args)
    except (UsageError, *USER_ERRORS) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - last-resort exit code
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
