"""Command-line entry point: ``poselift {synth,train,eval,probe,stability}``.

Relative output paths are resolved under ``$POSELIFT_OUTPUT_DIR`` when it is
set. Every file written carries the sha256 of the configuration that produced
it. Exit status is 0 on success, 1 on a runtime or data error and 2 on bad
arguments.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import __version__
from .data import SynthConfig, load_dataset, synthesize, write_records
from .errors import ConfigError, PoseliftError
from .evaluation import evaluate_model
from .losses import LossWeights
from .models import Representation
from .studies import probe_correlations, stability_study
from .training import PROFILES, TrainConfig, config_hash, load_models, train

log = logging.getLogger("poselift")

OUTPUT_DIR_ENV = "POSELIFT_OUTPUT_DIR"
REPRESENTATIONS = [r.value for r in Representation]


class UsageError(PoseliftError):
    """Invalid or conflicting command-line flags."""


def output_path(path: str | Path) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_DIR_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p


def _positive_int(text: str) -> int:
    try:
        v = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if v < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {v}")
    return v


def _positive_float(text: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}") from None
    if not v > 0:
        raise argparse.ArgumentTypeError(f"expected a positive number, got {v}")
    return v


def _weights(text: str) -> LossWeights:
    try:
        return LossWeights.parse(text)
    except ConfigError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def _seeds(text: str) -> list[int]:
    try:
        seeds = [int(s) for s in text.split(",") if s.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"seeds must be comma-separated integers, got {text!r}") from None
    if len(seeds) < 2:
        raise argparse.ArgumentTypeError("give at least two seeds")
    return seeds


def _window(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"window must be 'start,end', got {text!r}") from None
    return lo, hi


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poselift", description="Unsupervised adversarial 2D-to-3D pose lifting.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic pose corpus")
    s.add_argument("--config", help="generator config (JSON); defaults to the bundled skeleton")
    s.add_argument("--count", type=_positive_int, help="number of poses (overrides the config)")
    s.add_argument("--seed", type=int, help="generator seed (overrides the config)")
    s.add_argument("--out", required=True, help="output JSONL file")

    t = sub.add_parser("train", help="train a lifter")
    t.add_argument("--data", required=True, help="training corpus (JSONL)")
    t.add_argument("--eval-data", help="corpus with 3D ground truth scored after every epoch")
    t.add_argument("--config", help="train config (JSON); flags below override it")
    t.add_argument("--profile", choices=sorted(PROFILES), help="named preset (default: large)")
    t.add_argument("--rep", choices=REPRESENTATIONS)
    t.add_argument("--epochs", type=_positive_int)
    t.add_argument("--batch", type=_positive_int)
    t.add_argument("--lr", type=_positive_float)
    t.add_argument("--seed", type=int)
    t.add_argument("--weights", type=_weights, help="w1,w2,w3 for adversarial, reprojection, 90-degree")
    t.add_argument("--out", required=True, help="run directory")

    e = sub.add_parser("eval", help="score a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True, help="corpus with 3D ground truth")
    e.add_argument("--report", required=True, help="metrics CSV; per-pose errors go next to it")
    e.add_argument("--rep", choices=REPRESENTATIONS, help="refuse checkpoints of another representation")
    e.add_argument("--no-scale", action="store_true", help="align with rotation and translation only")

    q = sub.add_parser("probe", help="keypoint sensitivity probe")
    q.add_argument("--ckpt", required=True)
    q.add_argument("--data", required=True)
    q.add_argument("--out", required=True, help="output directory")
    q.add_argument("--pose-index", type=int, help="probe one pose instead of the dataset mean")

    b = sub.add_parser("stability", help="multi-seed stability study")
    b.add_argument("--config", required=True, help="train config (JSON) with 'data' and 'eval_data' paths")
    b.add_argument("--seeds", required=True, type=_seeds, help="comma-separated, at least two")
    b.add_argument("--out", required=True, help="output directory")
    b.add_argument("--data", help="training corpus (overrides the config)")
    b.add_argument("--eval-data", help="evaluation corpus (overrides the config)")
    b.add_argument("--window", type=_window, help="start,end epochs (default: last quarter)")
    b.add_argument("--workers", type=_positive_int, default=1)
    return p


def _write(path: Path, text: str) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _train_config(args) -> TrainConfig:
    doc: dict = {}
    if args.config:
        doc = json.loads(_existing(args.config, "config").read_text())
        doc = {k: v for k, v in doc.items() if k not in ("data", "eval_data")}
        if args.profile and doc.get("profile", args.profile) != args.profile:
            raise UsageError(f"--profile {args.profile} conflicts with profile {doc['profile']!r} in {args.config}")
    if args.profile:
        doc["profile"] = args.profile
    flags = {"representation": args.rep, "epochs": args.epochs, "batch_size": args.batch, "lr": args.lr,
             "seed": args.seed}
    doc.update({k: v for k, v in flags.items() if v is not None})
    if args.weights is not None:
        doc["weights"] = vars(args.weights)
    return TrainConfig.from_dict(doc)


def cmd_synth(args) -> int:
    overrides = {k: v for k, v in (("count", args.count), ("seed", args.seed)) if v is not None}
    if args.config:
        _existing(args.config, "synth config")
    cfg = SynthConfig.load(args.config, **overrides)
    digest = config_hash({k: getattr(cfg, k) for k in cfg.__dataclass_fields__})
    out = write_records(output_path(args.out), synthesize(cfg), comment=f"config_sha256={digest}")
    log.info("synth config %s", json.dumps({"count": cfg.count, "seed": cfg.seed, "sha256": digest}))
    print(f"wrote {cfg.count} poses to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = load_dataset(_existing(args.data, "data"))
    eval_set = load_dataset(_existing(args.eval_data, "eval data")) if args.eval_data else None
    out = output_path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write(out / "config.json", json.dumps({"config": cfg.to_dict(), "config_sha256": cfg.hash()},
                                           indent=2, sort_keys=True) + "\n")
    log.info("train config %s sha256=%s", json.dumps(cfg.to_dict(), sort_keys=True), cfg.hash())
    rec = train(data, cfg, eval_set=eval_set, out_dir=out, progress=args.verbose)
    last = rec.epochs[-1]
    msg = f"trained {cfg.representation} for {cfg.epochs} epochs; final d_loss {last.d_loss:.4f}"
    if last.eval_mpjpe is not None:
        msg += f", eval MPJPE {last.eval_mpjpe:.2f} mm"
    print(msg)
    print(f"checkpoint: {rec.checkpoints[-1]}")
    return 0


def cmd_eval(args) -> int:
    lifter, _, meta, _ = load_models(_existing(args.ckpt, "checkpoint"), expect=args.rep)
    data = load_dataset(_existing(args.data, "data"))
    report = evaluate_model(lifter, data, align_scale=not args.no_scale)
    digest = meta.get("config_sha256")
    path = _write(output_path(args.report), report.to_csv(digest))
    _write(path.with_name(path.stem + ".per_pose.csv"), report.per_pose_csv(digest))
    print(f"representation {meta['representation']} (seed {meta['seed']}, epoch {meta['epoch']})")
    print(report.to_table())
    return 0


def cmd_probe(args) -> int:
    lifter, _, meta, _ = load_models(_existing(args.ckpt, "checkpoint"))
    data = load_dataset(_existing(args.data, "data"))
    if args.pose_index is not None and not 0 <= args.pose_index < len(data):
        raise UsageError(f"--pose-index {args.pose_index} outside 0..{len(data) - 1}")
    tensor = probe_correlations(lifter, data, pose_index=args.pose_index)
    out = output_path(args.out)
    paths = tensor.write(out, meta.get("config_sha256"))
    part = lifter.representation.partition
    if part is not None:
        print(f"max cross-segment deviation ({part}): {tensor.max_cross_segment(lifter.schema, part):.6g}")
    print(f"wrote {len(paths)} files to {out}")
    return 0


def cmd_stability(args) -> int:
    doc = json.loads(_existing(args.config, "config").read_text())
    base = Path(args.config).parent

    def locate(flag, key):
        # Paths inside the config are relative to the config file.
        if flag:
            return _existing(flag, key)
        if not doc.get(key):
            raise UsageError(f"stability needs '{key}' in the config or as a flag")
        p = Path(doc[key])
        return _existing(str(p if p.is_absolute() else base / p), key)

    cfg = TrainConfig.load(args.config)
    data = load_dataset(locate(args.data, "data"))
    eval_set = load_dataset(locate(args.eval_data, "eval_data"))
    out = output_path(args.out)
    log.info("stability config %s sha256=%s seeds=%s", json.dumps(cfg.to_dict(), sort_keys=True), cfg.hash(),
             args.seeds)
    summary = stability_study(cfg, args.seeds, data, eval_set, args.window, out / "runs", args.workers)
    _write(out / "stability.csv", summary.to_csv())
    _write(out / "curves.csv", summary.curves_csv())
    _write(out / "summary.txt", f"# config_sha256={cfg.hash()}\n{summary.to_table()}\n")
    print(summary.to_table())
    return 1 if summary.aborted else 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "probe": cmd_probe,
            "stability": cmd_stability}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"poselift {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (PoseliftError, OSError, json.JSONDecodeError) as exc:
        print(f"poselift {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
