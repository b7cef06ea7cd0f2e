"""Command-line entry point.

Subcommands: synth, train, xval, ablate, score, gradcheck. Exit codes:
0 success, 1 usage or config error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import backbone as B
from .config import ConfigError, ExperimentConfig, load_config
from .data import ContainerError, ManifestError, generate_synthetic
from .harness import (
    format_report_csv,
    load_predictions_csv,
    run_ablation,
    run_crossval,
    train_full,
)
from .losses import batch_loss, compute_weights, count_intensities
from .metrics import build_report
from .siamese import OFC_CSN, PredictionMode, detection_decisions, forward_csn
from .tensor import NonFiniteError, Tensor, grad_check

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse defaults to exit code 2
        raise UsageError(message)


def build_parser() -> _Parser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE", help="config file (key = value lines)")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--out", metavar="DIR", help="override output directory")
    common.add_argument("--set", metavar="KEY=VALUE", action="append", default=[],
                        dest="overrides", help="override any config key (repeatable)")

    parser = _Parser(prog="aucalib",
                     description="one-frame-calibrated action unit recognition")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND",
                               parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common],
                       help="generate a synthetic dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common],
                       help="train checkpoints on one fold's training split")
    p.add_argument("--fold", type=int, default=0, help="fold index (default 0)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("xval", parents=[common],
                       help="cross-validate every configured prediction mode")
    p.set_defaults(func=cmd_xval)

    p = sub.add_parser("ablate", parents=[common],
                       help="cross-validate the calibrated model at several merge points")
    p.add_argument("--merges", default="stage1,stage2,stage3,stage4,fc,output",
                   help="comma-separated merge points (default all)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("score", parents=[common],
                       help="compute metrics from a predictions CSV")
    p.add_argument("--pred", required=True, metavar="FILE",
                   help="CSV with participant,frame,au,label,prediction rows")
    p.add_argument("--mode", default="ncg",
                   help="decision rule for detection scores (default ncg)")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="finite-difference gradient audit on a compact network")
    p.add_argument("--graphs", default="plain,ofc_csn:stage2,ofc_csn:output",
                   help="comma-separated graphs to audit")
    p.add_argument("--tol", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def _config_from_args(args) -> ExperimentConfig:
    overrides: dict[str, str] = {}
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"--set expects KEY=VALUE, got {item!r}")
        key, _, value = item.partition("=")
        overrides[key.strip()] = value.strip()
    if args.seed is not None:
        overrides["seed"] = str(args.seed)
    if args.out is not None:
        overrides["out"] = args.out
    cfg = load_config(args.config, overrides)
    cfg.validate()
    return cfg


def cmd_synth(args) -> int:
    cfg = _config_from_args(args)
    result = generate_synthetic(cfg.synth, Path(cfg.out))
    man = result.manifest
    print(f"wrote {result.manifest_path}")
    print(f"wrote {result.container_path}")
    print(f"{len(man.participants())} participants, {len(man.records)} frames, "
          f"{len(man.au_names)} aus")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    stores, logs, out = train_full(cfg, fold=args.fold)
    for log in logs:
        tail = log.epoch_losses[-1] if log.epoch_losses else float("nan")
        print(f"{log.model}: loss {log.initial_loss:.4f} -> {tail:.4f} "
              f"over {len(log.epoch_losses)} epochs")
    (out / "train_log.json").write_text(
        json.dumps([lg.to_jsonable() for lg in logs], indent=2, sort_keys=True) + "\n",
        encoding="utf-8")
    print(f"checkpoints in {out}")
    return EXIT_OK


def _print_report_summary(result) -> None:
    print(format_report_csv(result.config, result.reports), end="")
    if result.csv_path is not None:
        print(f"report: {result.csv_path}")
        print(f"details: {result.json_path}")
    for path in result.prediction_paths:
        print(f"predictions: {path}")
    for fig in result.figure_paths:
        print(f"figure: {fig}")


def cmd_xval(args) -> int:
    cfg = _config_from_args(args)
    result = run_crossval(cfg)
    _print_report_summary(result)
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _config_from_args(args)
    merges = [m.strip() for m in args.merges.split(",") if m.strip()]
    if len(merges) < 2:
        raise UsageError("--merges needs at least 2 merge points")
    for m in merges:
        try:
            PredictionMode.parse(f"{OFC_CSN}:{m}")
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    result = run_ablation(cfg, merges)
    _print_report_summary(result)
    return EXIT_OK


def cmd_score(args) -> int:
    cfg = _config_from_args(args)
    pset = load_predictions_csv(args.pred, cfg.task)
    decide = None
    if cfg.task == B.TASK_DETECTION:
        mode = PredictionMode.parse(args.mode)
        decide = lambda s: detection_decisions(s, mode, delta=cfg.delta)  # noqa: E731
    report = build_report([pset], decide=decide)
    for metric, values in report.per_au.items():
        cells = " ".join(f"{v:.4f}" for v in values)
        print(f"{metric:12s} {cells}  avg {report.average[metric]:.4f}")
    return EXIT_OK


def _audit_spec(task: str) -> B.BackboneSpec:
    # sized to fit the finite-difference budget; the real net is too big to sweep
    return B.BackboneSpec(in_channels=1, height=16, width=16,
                          stages=(B.StageSpec(4), B.StageSpec(8)),
                          hidden=8, n_au=3, task=task)


def _audit_builder(graph: str, task: str, seed: int):
    spec = _audit_spec(task)
    store = B.init_backbone(spec, seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.normal(size=(2, spec.in_channels, spec.height, spec.width))
    r = rng.normal(size=x.shape)
    labels = rng.integers(0, 6, size=(2, spec.n_au))
    weights = compute_weights(count_intensities(labels, spec.n_au))
    if graph != "plain":
        merge = PredictionMode.parse(graph).merge

    def loss_fn():
        if graph == "plain":
            head = B.forward(store, spec, Tensor(x))
        else:
            head = forward_csn(store, spec, Tensor(x), Tensor(r), merge)
        return batch_loss(task, labels, head, weights)

    return lambda: (store.tensors, loss_fn)


def cmd_gradcheck(args) -> int:
    cfg = _config_from_args(args)
    graphs = [g.strip() for g in args.graphs.split(",") if g.strip()]
    if not graphs:
        raise UsageError("--graphs must name at least one graph")
    for g in graphs:
        if g != "plain" and (not g.startswith(f"{OFC_CSN}:")):
            raise UsageError(f"graph must be 'plain' or '{OFC_CSN}:<merge>', got {g!r}")
    worst = 0.0
    for g in graphs:
        report = grad_check(_audit_builder(g, cfg.task, cfg.seed), tol=args.tol)
        print(f"== {g} ==")
        print(report.format_table())
        print()
        worst = max(worst, report.max_rel_err)
    if worst >= args.tol:
        print(f"FAIL: max relative error {worst:.3e} >= {args.tol:.0e}")
        return EXIT_NUMERIC
    print(f"OK: max relative error {worst:.3e} < {args.tol:.0e}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if getattr(args, "command", None) is None:
            parser.print_usage(sys.stderr)
            return EXIT_USAGE
        return args.func(args)
    except SystemExit as exc:  # argparse --help
        return int(exc.code or 0)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ManifestError, ContainerError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
