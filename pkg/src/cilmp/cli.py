"""Command-line interface.

Subcommands: pretrain, bank (generate | inspect | cka), train, eval,
ablate, report. Configuration comes from a JSON file; --seed and --mode
override it. Exit codes: 0 success, 2 configuration or format error,
3 numerical abort during training.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from . import harness
from .concepts import cka_heatmap, load_bank, save_bank
from .encoders import save_encoders
from .errors import ConfigError, FormatError, NumericalAbort
from .harness import ExperimentConfig, load_config
from .metrics import aggregate
from .prompts import RUN_MODES


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cilmp", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, mode_flag=True):
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override the config seed")
        if mode_flag:
            p.add_argument("--mode", choices=RUN_MODES, default=None, help="override the run mode")

    p = sub.add_parser("pretrain", help="pre-train the dual encoder and write a frozen snapshot")
    common(p, mode_flag=False)
    p.add_argument("--out", required=True, help="encoder snapshot path")

    p = sub.add_parser("bank", help="concept bank utilities")
    bank_sub = p.add_subparsers(dest="bank_command", required=True)
    g = bank_sub.add_parser("generate", help="generate the config's synthetic bank")
    common(g, mode_flag=False)
    g.add_argument("--out", required=True, help="bank file path")
    i = bank_sub.add_parser("inspect", help="print bank dimensions and provenance")
    i.add_argument("--path", required=True)
    k = bank_sub.add_parser("cka", help="write the layer-similarity heatmap as CSV")
    k.add_argument("--path", required=True)
    k.add_argument("--class", dest="class_index", type=int, default=0)
    k.add_argument("--out", default=None, help="CSV path (default: stdout)")

    p = sub.add_parser("train", help="run both phases and write the run report")
    common(p)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--checkpoint", default=None, help="also write a full checkpoint")

    p = sub.add_parser("eval", help="score a checkpoint on its config's test split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", default=None, help="expected config; mismatches are format errors")
    p.add_argument("--out", default=None, help="metrics JSON path (default: stdout)")

    p = sub.add_parser("ablate", help="paired-seed mode comparison or a hyper-parameter sweep")
    common(p, mode_flag=True)
    p.add_argument("--modes", default="cilmp,no_rd,no_conditional,no_intervention")
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--out", required=True, help="CSV path")
    p.add_argument("--sweep", choices=sorted(harness.SWEEP_GRIDS), default=None)
    p.add_argument("--workers", type=int, default=None)

    p = sub.add_parser("report", help="aggregate run reports into a summary CSV")
    p.add_argument("--inputs", nargs="+", required=True, help="report JSON files")
    p.add_argument("--out", default=None, help="CSV path (default: stdout)")
    return parser


def _load(args, mode_flag=True) -> ExperimentConfig:
    cfg = load_config(args.config)
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if mode_flag and getattr(args, "mode", None):
        overrides["mode"] = args.mode
    return cfg.with_overrides(**overrides) if overrides else cfg


def _write(path: str | None, text: str) -> None:
    if path is None:
        sys.stdout.write(text)
    else:
        with open(path, "w", newline="") as fh:
            fh.write(text)


def _cmd_pretrain(args) -> int:
    cfg = _load(args, mode_flag=False)
    data, _ = harness.generate_dataset(cfg)
    model = harness.build_pretrained_encoders(cfg, data)
    model.freeze()
    save_encoders(model, args.out)
    print(f"wrote frozen encoders to {args.out} (checksum {model.checksum():#018x})", file=sys.stderr)
    return 0


def _cmd_bank(args) -> int:
    if args.bank_command == "generate":
        cfg = _load(args, mode_flag=False)
        _, bank = harness.generate_dataset(cfg)
        save_bank(bank, args.out)
        print(f"wrote bank {bank.num_classes}x{bank.seq_len}x{bank.width} to {args.out}", file=sys.stderr)
        return 0
    bank = load_bank(args.path)
    if args.bank_command == "inspect":
        print(
            json.dumps(
                {
                    "num_classes": bank.num_classes,
                    "seq_len": bank.seq_len,
                    "width": bank.width,
                    "class_names": bank.class_names,
                    "provenance": bank.provenance,
                    "checksum": bank.checksum(),
                },
                indent=2,
                sort_keys=True,
            )
        )
        return 0
    heatmap = cka_heatmap(bank, args.class_index)
    lines = [",".join(f"{v:.6f}" for v in row) for row in heatmap.values]
    _write(args.out, "\n".join(lines) + "\n")
    return 0


def _cmd_train(args) -> int:
    cfg = _load(args)
    report, model = harness.train(cfg)
    _write(args.out, report.to_json())
    if args.checkpoint:
        harness.save_checkpoint(args.checkpoint, cfg, model)
    acc = report.metrics["accuracy"]
    print(f"mode={cfg.mode} seed={cfg.seed} accuracy={acc:.4f} wall={report.wall_time_s:.1f}s", file=sys.stderr)
    return 0


def _cmd_eval(args) -> int:
    expected = load_config(args.config) if args.config else None
    results = harness.evaluate_checkpoint(args.checkpoint, expected)
    _write(args.out, json.dumps(results, indent=2, sort_keys=True) + "\n")
    return 0


def _cmd_ablate(args) -> int:
    cfg = _load(args)
    seeds = [int(s) for s in args.seeds.split(",") if s]
    if args.sweep:
        results = harness.run_sweep(cfg, args.sweep, seeds=seeds, workers=args.workers)
        _write(args.out, harness.sweep_to_csv(args.sweep, results))
        return 0
    modes = [m for m in args.modes.split(",") if m]
    table = harness.run_ablation(cfg, modes, seeds, workers=args.workers)
    _write(args.out, table.to_csv())
    return 0


def _cmd_report(args) -> int:
    runs = []
    for path in args.inputs:
        with open(path) as fh:
            runs.append(harness.RunReport.from_json(fh.read()))
    stats = aggregate([r.metrics for r in runs])
    keys = sorted(stats)
    lines = ["metric,mean,std,n"]
    for key in keys:
        s = stats[key]
        std = "" if s.std is None else f"{s.std:.6f}"
        lines.append(f"{key},{s.mean:.6f},{std},{s.n}")
    _write(args.out, "\n".join(lines) + "\n")
    return 0


_COMMANDS = {
    "pretrain": _cmd_pretrain,
    "bank": _cmd_bank,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "report": _cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = _build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, FormatError, FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalAbort as exc:
        print(
            f"numerical abort at epoch {exc.epoch} step {exc.step}: {exc} (grad norms: {exc.grad_norms})",
            file=sys.stderr,
        )
        return 3


if __name__ == "__main__":
    sys.exit(main())
