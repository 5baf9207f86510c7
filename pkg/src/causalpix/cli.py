"""Command-line surface: train, eval, sample, ablate, probe, report, version.

Exit codes: 0 success, 1 failed probe or runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .ablations import ABLATIONS
from .checkpoint import CheckpointError, load_checkpoint
from .config import RunConfig
from .data import DataFormatError, Dataset
from .network import (
    FIELD_11X5,
    FIELD_15X8,
    ConfigError,
    Model,
    causality_violations,
    field_mismatches,
    receptive_field,
)
from .plotting import plot_metrics_files
from .tensor import ShapeError
from .runner import load_data, run_training, with_ablation
from .sampling import emit_class_grid, emit_samples
from .training import TrainingError, evaluate

log = logging.getLogger("causalpix")

FIELD_PRESETS = {"11x5": FIELD_11X5, "15x8": FIELD_15X8}


def _run_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="JSON RunConfig; flags below override it")
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--cifar", type=Path, help="CIFAR-10 binary batch file (default: synthetic images)")
    p.add_argument("--log-every", type=int)
    p.add_argument("--eval-every", type=int)
    p.add_argument("--wall-clock", action="store_true", help="fill the seconds column (breaks byte reproducibility)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="causalpix", description="Autoregressive pixel model at desk scale.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _run_flags(sub.add_parser("train", help="train a model and write checkpoint + metrics"))

    ab = sub.add_parser("ablate", help="train one ablation variant")
    ab.add_argument("name", choices=ABLATIONS)
    _run_flags(ab)

    ev = sub.add_parser("eval", help="bits per sub-pixel of a checkpoint on the eval split")
    ev.add_argument("checkpoint", type=Path)
    ev.add_argument("--config", type=Path, help="RunConfig whose data settings to use")
    ev.add_argument("--cifar", type=Path)
    ev.add_argument("--ema", action="store_true", help="score the EMA parameters")

    sa = sub.add_parser("sample", help="draw images from a checkpoint into PPM files")
    sa.add_argument("checkpoint", type=Path)
    sa.add_argument("--n", type=int, default=4)
    sa.add_argument("--size", type=int, default=16)
    sa.add_argument("--seed", type=int, default=0)
    sa.add_argument("--label", type=int)
    sa.add_argument("--grid", type=int, metavar="ROWS", help="write a class grid with ROWS rows instead")
    sa.add_argument("--out", type=Path, default=Path("samples"))

    pr = sub.add_parser("probe", help="gradient-probe checks")
    pr.add_argument("what", choices=("causality", "field"))
    pr.add_argument("--config", type=Path)
    pr.add_argument("--small-field", choices=sorted(FIELD_PRESETS), help="probe a plain small-field stack")
    pr.add_argument("--size", type=int, default=8)
    pr.add_argument("--seed", type=int, default=0)

    rp = sub.add_parser("report", help="plot metrics CSVs into one PNG")
    rp.add_argument("csv", type=Path, nargs="+")
    rp.add_argument("--out", type=Path, required=True)
    rp.add_argument("--title")

    sub.add_parser("version", help="print the package version")
    return parser


def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    changes = {}
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("batch_size", "batch_size"),
                      ("log_every", "log_every"), ("eval_every", "eval_every")):
        if getattr(args, flag) is not None:
            changes[key] = getattr(args, flag)
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if args.wall_clock:
        changes["wall_clock"] = True
    if args.cifar is not None:
        changes["data"] = dataclasses.replace(cfg.data, cifar_path=str(args.cifar))
    return dataclasses.replace(cfg, **changes)


def _cmd_train(args) -> int:
    cfg = _run_config(args)
    if args.command == "ablate":
        cfg = with_ablation(cfg, args.name)
    cfg = cfg.resolved()
    s = run_training(cfg)
    print(f"steps={s.steps} initial_train_bpd={s.initial_train_bpd:.6f} "
          f"final_train_bpd={s.final_train_bpd:.6f} final_eval_bpd={s.final_eval_bpd:.6f}")
    print(f"out_dir={s.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    ck = load_checkpoint(args.checkpoint)
    cfg = RunConfig.load(args.config) if args.config else RunConfig(model=ck.config)
    if args.cifar is not None:
        cfg = dataclasses.replace(cfg, data=dataclasses.replace(cfg.data, cifar_path=str(args.cifar)))
    cfg = dataclasses.replace(cfg, model=ck.config).resolved()
    _, eval_set = load_data(cfg)
    if ck.config.n_classes is None:
        eval_set = Dataset(eval_set.images, None, eval_set.split)
    model = ck.build_model()
    if args.ema:
        if ck.optim is None:
            print("error: checkpoint has no EMA parameters", file=sys.stderr)
            return 1
        bpd = evaluate(model, eval_set, use_ema=True, optim=ck.optim)
    else:
        bpd = evaluate(model, eval_set)
    print(f"eval_bpd={bpd:.6f}")
    return 0


def _cmd_sample(args) -> int:
    model = load_checkpoint(args.checkpoint).build_model()
    if args.grid is not None:
        print(emit_class_grid(model, args.grid, args.out, args.size, args.size, seed=args.seed))
        return 0
    for p in emit_samples(model, args.n, args.out, args.size, args.size, seed=args.seed, label=args.label):
        print(p)
    return 0


def _cmd_probe(args) -> int:
    cfg = RunConfig.load(args.config).model if args.config else RunConfig().model
    if args.small_field:
        cfg = cfg.replace(use_downsampling=False, small_field=FIELD_PRESETS[args.small_field])
    model = Model(cfg, seed=args.seed)
    if args.what == "causality":
        bad = causality_violations(model, args.size, args.size, seed=args.seed)
        for i, j, ii, jj in bad[:20]:
            print(f"violation: output ({i},{j}) depends on input ({ii},{jj})")
        print(f"causality {'FAIL' if bad else 'ok'}: {len(bad)} violations on {args.size}x{args.size}")
        return 1 if bad else 0
    desc = receptive_field(cfg)
    print(json.dumps(dataclasses.asdict(desc)))
    bad = field_mismatches(model, args.size, args.size, seed=args.seed)
    print(f"field {'FAIL' if bad else 'ok'}: {len(bad)} mismatched positions on {args.size}x{args.size}")
    return 1 if bad else 0


def _cmd_report(args) -> int:
    print(plot_metrics_files(args.csv, args.out, title=args.title))
    return 0


COMMANDS = {
    "train": _cmd_train,
    "ablate": _cmd_train,
    "eval": _cmd_eval,
    "sample": _cmd_sample,
    "probe": _cmd_probe,
    "report": _cmd_report,
    "version": lambda args: print(__version__) or 0,
}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except ShapeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CheckpointError, DataFormatError, TrainingError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
