"""Command-line entry points: ``egsnet {synth,train,eval,compare}``.

Exit codes: 0 success, 1 runtime failure, 2 configuration error, 3 artifact
mismatch. ``EGSNET_OUTPUT_ROOT`` sets the default output root (``./runs``).
"""

from __future__ import annotations

import argparse
import csv
import datetime as dt
import json
import logging
import os
import sys
from pathlib import Path

from .config import Config, ConfigError, MODES, dump_config, load_config, parse_set
from .datasets import DatasetError, directory_digest, dump_suite, generate_synthetic_suite, load_suite
from .evaluator import EvaluationError, compare_bundles, evaluate_suite, read_bundle, write_bundle
from .trainer import TrainingError, load_checkpoint, train, write_logs

EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_MISMATCH = 0, 1, 2, 3

log = logging.getLogger("egsnet")


class MismatchError(RuntimeError):
    pass


def output_root() -> Path:
    return Path(os.environ.get("EGSNET_OUTPUT_ROOT", "runs"))


def _now() -> str:
    return dt.datetime.now(dt.timezone.utc).isoformat(timespec="seconds")


def build_registry(cfg: Config):
    if cfg.data_dir:
        return load_suite(cfg.data_dir, side=cfg.image_side)
    return generate_synthetic_suite(cfg.synthetic())


def _config_from_args(args) -> Config:
    return load_config(args.config, parse_set(args.set))


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    out = Path(args.out) if args.out else output_root() / "data"
    registry = generate_synthetic_suite(cfg.synthetic())
    try:
        dump_suite(registry, out)
    except OSError as e:
        print(f"error: cannot write {out}: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    print(json.dumps({"data_dir": str(out), "digest": directory_digest(out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    overrides = parse_set(args.set)
    if args.mode:
        overrides["mode"] = args.mode
    state = None
    if args.resume:
        state, saved = load_checkpoint(args.resume)
        cfg = saved.replace(**overrides)
    else:
        cfg = load_config(args.config, overrides)
    registry = build_registry(cfg)
    run_id = args.run_id or f"{cfg.mode}-seed{cfg.seed}-{cfg.content_hash()[:8]}"
    run_dir = Path(args.out) if args.out else output_root() / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    started = _now()
    dump_config(cfg, run_dir / "config.yaml")
    state = train(cfg, registry, run_dir, state=state, max_steps=args.max_steps)
    logs = write_logs(state, run_dir)
    ckpts = sorted(str(p) for p in (run_dir / "checkpoints").glob("*.pt"))
    manifest = {
        "run_id": run_id,
        "config": cfg.to_dict(),
        "config_hash": cfg.content_hash(),
        "stage_tag": state.stage_tag,
        "checkpoints": ckpts,
        "final_checkpoint": str(run_dir / "checkpoints" / "final.pt") if (run_dir / "checkpoints" / "final.pt").exists() else None,
        "history": str(logs["history"]),
        "steps": str(logs["steps"]),
        "timing": str(logs["timing"]),
        "started": started,
        "finished": _now(),
    }
    missing = [p for p in [*ckpts, manifest["history"], manifest["steps"]] if not Path(p).exists()]
    if missing:
        raise RuntimeError(f"run artifacts missing: {missing}")
    with open(run_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    print(json.dumps({"run_dir": str(run_dir), "stage_tag": state.stage_tag}))
    return EXIT_OK


def cmd_eval(args) -> int:
    try:
        state, ckpt_cfg = load_checkpoint(args.checkpoint)
    except (OSError, TrainingError, KeyError) as e:
        raise MismatchError(f"cannot load checkpoint {args.checkpoint}: {e}") from e
    overrides = parse_set(args.set)
    if args.config:
        file_cfg = load_config(args.config, overrides)
        from .model import Encoder

        want = Encoder(file_cfg.backbone, file_cfg.channels, file_cfg.blocks).dim
        if want != state.model.dim:
            raise MismatchError(f"embedding dim mismatch: config implies {want}, checkpoint has {state.model.dim}")
        cfg = file_cfg
    else:
        cfg = ckpt_cfg.replace(**overrides)
    if args.data:
        cfg = cfg.replace(data_dir=args.data)
    if args.tasks:
        cfg = cfg.replace(eval_tasks=args.tasks)
    # explicit data is read at its native size so a shape mismatch surfaces
    registry = load_suite(args.data) if args.data else build_registry(cfg)
    shape = registry.target_domain.image_shape
    arch = state.model.arch
    if arch.get("image_side") not in (None, shape[0]) or arch.get("in_channels", 3) != shape[2]:
        raise MismatchError(f"checkpoint expects {arch.get('image_side')}px x {arch.get('in_channels')} images, data has {shape}")
    if registry.num_canonical != arch["num_classes"]:
        raise MismatchError(f"classifier width {arch['num_classes']} != {registry.num_canonical} canonical classes")
    splits = args.splits.split(",") if args.splits else cfg.splits
    shots = [int(s) for s in args.shots.split(",")] if args.shots else cfg.shots
    bundle = evaluate_suite(
        state.model, registry, cfg, splits, shots, args.branch,
        extra={"checkpoint": str(args.checkpoint), "stage_tag": state.stage_tag, "mode": cfg.mode, "seed": cfg.seed},
    )
    out = Path(args.out) if args.out else Path(args.checkpoint).parent.parent / "eval"
    paths = write_bundle(bundle, out)
    print(json.dumps({k: str(v) for k, v in paths.items()}))
    return EXIT_OK


def cmd_compare(args) -> int:
    bundles = {}
    for p in args.bundles:
        name = Path(p).name if Path(p).is_dir() else Path(p).parent.name
        if name in bundles:
            name = str(p)
        bundles[name] = read_bundle(p)
    rows = compare_bundles(bundles)
    fields = list(dict.fromkeys(k for r in rows for k in r))
    fh = open(args.out, "w", newline="") if args.out else sys.stdout
    try:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        w.writerows(rows)
    finally:
        if args.out:
            fh.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="egsnet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write the synthetic suite in image-folder convention")
    s.add_argument("--config")
    s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    s.add_argument("--out")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--mode", choices=MODES)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--out")
    t.add_argument("--run-id")
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--max-steps", type=int, help="stop after this many steps (for smoke runs)")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="meta-test a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--data", help="dataset directory (default: checkpoint's data settings)")
    e.add_argument("--config")
    e.add_argument("--splits", help="comma list from target,basic,compound")
    e.add_argument("--shots", help="comma list, e.g. 1,5")
    e.add_argument("--branch", choices=("similarity", "emotion"))
    e.add_argument("--tasks", type=int)
    e.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    e.add_argument("--out")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("compare", help="tabulate report bundles")
    c.add_argument("bundles", nargs="+")
    c.add_argument("--out")
    c.set_defaults(func=cmd_compare)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except EvaluationError as e:
        if e.split is not None:
            print(f"split error [{e.split}]: {e}", file=sys.stderr)
            return EXIT_MISMATCH
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    except MismatchError as e:
        print(f"mismatch: {e}", file=sys.stderr)
        return EXIT_MISMATCH
    except (DatasetError, TrainingError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
