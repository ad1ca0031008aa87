"""``dualseg`` command line: gen-data, train, eval, selfcheck, ablate.

Numeric settings come from a JSON config file; flags only name paths and
switches.  Exit codes: 0 success, 1 failed self-check, 2 bad config or path,
3 training diverged.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from .checkpoint import load_params
from .dataset import GenConfig, read_dataset, write_dataset
from .errors import ArgumentError, ConfigError, TrainingDiverged
from .model import ModelConfig
from .trainer import ABLATION_LADDER, RunConfig, evaluate, prepare_scene, train

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_DIVERGED = 0, 1, 2, 3


def _keys_help(title: str, cls) -> str:
    lines = [f"{title} (JSON object, unknown keys rejected):"]
    defaults = cls()
    for f in dataclasses.fields(cls):
        lines.append(f"  {f.name:<16} default {getattr(defaults, f.name)!r:<12} {cls.HELP.get(f.name, '')}")
    return "\n".join(lines)


def _load(cls, path, overrides: dict | None = None):
    d = {}
    if path:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config: no such file {p}")
        try:
            d = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config: malformed JSON in {p}: {exc}") from exc
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
    d.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return cls.from_dict(d)


def _need_dir(path, key: str) -> Path:
    if not path:
        raise ConfigError(f"{key}: missing (set it in the config or pass --{key.replace('_', '-')})")
    p = Path(path)
    if not (p / "manifest.json").is_file():
        raise ConfigError(f"{key}: no dataset at {p}")
    return p


def cmd_gen_data(args) -> int:
    cfg = _load(GenConfig, args.config)
    out = write_dataset(cfg.build(), args.out, force=args.force)
    print(json.dumps({"dataset": str(out), **dataclasses.asdict(cfg)}, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load(RunConfig, args.config, {"dataset_dir": args.dataset, "output_dir": args.out})
    _need_dir(cfg.dataset_dir, "dataset_dir")
    if not cfg.output_dir:
        raise ConfigError("output_dir: missing (set it in the config or pass --out)")
    result = train(cfg)
    summary = {"seconds": round(result.seconds, 2), "output_dir": cfg.output_dir}
    if result.final_eval:
        summary["val"] = result.final_eval.to_json()
    print(json.dumps(summary, sort_keys=True))
    return EXIT_OK


def cmd_eval(args) -> int:
    root = _need_dir(args.dataset, "dataset")
    if not Path(f"{args.checkpoint}.json").is_file():
        raise ConfigError(f"checkpoint: no such checkpoint {args.checkpoint}")
    params, meta = load_params(args.checkpoint, requires_grad=False)
    model_cfg = ModelConfig.from_dict(meta["model"])
    run = meta.get("run", {})
    ds = read_dataset(root)
    ids = {"val": ds.val, "train": ds.labeled + ds.unlabeled, "labeled": ds.labeled,
           "unlabeled": ds.unlabeled}[args.split]
    if not ids:
        raise ConfigError(f"split: {args.split} is empty in {root}")
    scenes = [prepare_scene(ds.scenes[s], ds.views[s], ds.n_classes, model_cfg.branch.voxel_size,
                            ds.room_size, run.get("window", 9), run.get("n_views")) for s in ids]
    res = evaluate(params, model_cfg, scenes, np.dtype(run.get("dtype", "float32")))
    print(json.dumps({"split": args.split, "scenes": len(ids), **res.to_json()}, sort_keys=True))
    return EXIT_OK


def cmd_selfcheck(args) -> int:
    from .selfcheck import run_all

    start = time.perf_counter()
    results = run_all()
    for name, ok, detail in results:
        print(f"{'PASS' if ok else 'FAIL'} {name}: {detail}")
    failed = [r for r in results if not r[1]]
    print(f"selfcheck finished in {time.perf_counter() - start:.1f}s")
    if failed:
        print(f"first failure: {failed[0][0]}: {failed[0][2]}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _load(RunConfig, args.config, {"dataset_dir": args.dataset, "output_dir": args.out})
    _need_dir(base.dataset_dir, "dataset_dir")
    if not base.output_dir:
        raise ConfigError("output_dir: missing (set it in the config or pass --out)")
    seeds = [int(s) for s in args.seeds.split(",")]
    ds = read_dataset(base.dataset_dir)
    cache: dict = {}
    rows = []
    for name, flags in ABLATION_LADDER.items():
        per_seed = []
        for seed in seeds:
            out = Path(base.output_dir) / name / f"seed_{seed}"
            cfg = dataclasses.replace(base.with_ablation(name), seed=seed, output_dir=str(out))
            res = train(cfg, ds, prepared=cache).final_eval
            per_seed.append({"seed": seed, "mIoU_3d": _miou(res, "3d"), "mIoU_2d": _miou(res, "2d")})
        m3 = float(np.mean([r["mIoU_3d"] for r in per_seed]))
        m2 = float(np.mean([r["mIoU_2d"] for r in per_seed]))
        rows.append({"model": name, **flags, "mIoU_3d": m3, "mIoU_2d": m2, "mIoU_mean": (m3 + m2) / 2,
                     "runs": per_seed})
        print(f"{name:<9} 3D mIoU {100 * m3:6.2f}  2D mIoU {100 * m2:6.2f}", file=sys.stderr)
    table = {"seeds": seeds, "rows": rows}
    path = Path(base.output_dir) / "ablation.json"
    path.write_text(json.dumps(table, indent=1, sort_keys=True))
    print(json.dumps(table, sort_keys=True))
    return EXIT_OK


def _miou(res, modality: str) -> float:
    if res is None:
        raise ConfigError("dataset has no validation scenes to compare on")
    return res.to_json()[modality]["mIoU"]


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.RawDescriptionHelpFormatter
    p = argparse.ArgumentParser(prog="dualseg", description=__doc__, formatter_class=fmt,
                                epilog=_keys_help("train/ablate config keys", RunConfig) + "\n\n"
                                + _keys_help("gen-data config keys", GenConfig))
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="write a synthetic dataset", formatter_class=fmt,
                       epilog=_keys_help("config keys", GenConfig))
    g.add_argument("--out", required=True, help="dataset directory to create")
    g.add_argument("--config", help="JSON config file")
    g.add_argument("--force", action="store_true", help="overwrite a non-empty directory")
    g.set_defaults(fn=cmd_gen_data)

    for name, fn, text in (("train", cmd_train, "train one model"),
                           ("ablate", cmd_ablate, "train the Baseline/A/B/C/full ladder")):
        t = sub.add_parser(name, help=text, formatter_class=fmt, epilog=_keys_help("config keys", RunConfig))
        t.add_argument("--config", help="JSON config file")
        t.add_argument("--dataset", help="dataset directory (overrides dataset_dir)")
        t.add_argument("--out", help="output directory (overrides output_dir)")
        if name == "ablate":
            t.add_argument("--seeds", default="0,1,2", help="comma-separated seeds (default 0,1,2)")
        t.set_defaults(fn=fn)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True, help="checkpoint prefix, e.g. run/ckpt_final")
    e.add_argument("--dataset", required=True, help="dataset directory")
    e.add_argument("--split", default="val", choices=["val", "train", "labeled", "unlabeled"])
    e.set_defaults(fn=cmd_eval)

    s = sub.add_parser("selfcheck", help="run the built-in gradient/PLO/EMA/projection checks")
    s.set_defaults(fn=cmd_selfcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except TrainingDiverged as exc:
        print(f"error: {exc}; diagnostics in {exc.dump_path}", file=sys.stderr)
        return EXIT_DIVERGED
    except (ConfigError, ArgumentError, FileExistsError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
