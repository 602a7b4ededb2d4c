"""Command-line entry point.

    moeamc generate --config run.json
    moeamc train    --config run.json --model moe
    moeamc eval     --config run.json --model moe [--checkpoint path]
    moeamc report   --config run.json
    moeamc selftest

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 selftest failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from . import pipeline
from .models import MODEL_KINDS
from .selftest import run_selftest
from .sigsynth import DatasetFormatError
from .tensorcore import CheckpointError

EXIT_OK, EXIT_INVALID, EXIT_IO, EXIT_SELFTEST = 0, 1, 2, 3


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise _UsageError(f"{self.prog}: error: {message}")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="moeamc", description="Mixture-of-experts modulation classifier pipeline")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate", help="synthesize the dataset and its train/val/test splits")
    p.add_argument("--config", required=True)

    p = sub.add_parser("train", help="train one model and write its checkpoint and history CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True, choices=MODEL_KINDS)

    p = sub.add_parser("eval", help="score a checkpoint on the test split")
    p.add_argument("--config", required=True)
    p.add_argument("--model", required=True, choices=MODEL_KINDS)
    p.add_argument("--checkpoint")

    p = sub.add_parser("report", help="write CSV and SVG reports from saved metrics")
    p.add_argument("--config", required=True)

    sub.add_parser("selftest", help="run gradient and oracle checks")
    return parser


def _selftest() -> int:
    results = run_selftest()
    width = max(len(name) for name, _, _ in results)
    for name, ok, detail in results:
        print(f"{name:<{width}}  {'PASS' if ok else 'FAIL'}  {detail}")
    return EXIT_OK if all(ok for _, ok, _ in results) else EXIT_SELFTEST


def run_cli(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")

    if args.command == "selftest":
        return _selftest()
    try:
        cfg = pipeline.RunConfig.load(args.config)
        if args.command == "generate":
            parts = pipeline.generate_step(cfg)
            print(f"wrote {len(parts['full'])} examples to {cfg.out_dir}")
        elif args.command == "train":
            _, history = pipeline.train_step(cfg, args.model)
            best = history.records[history.best_epoch] if history.records else None
            print(f"trained {args.model}: {len(history.records)} epochs" + (f", best val_loss {best.val_loss:.4f}" if best else ""))
        elif args.command == "eval":
            m = pipeline.eval_step(cfg, args.model, args.checkpoint)
            print(f"{args.model}: test accuracy {m.overall_accuracy:.4f}")
        elif args.command == "report":
            for path in pipeline.report_step(cfg):
                print(path)
    except (pipeline.ConfigError, ValueError) as exc:
        if isinstance(exc, (DatasetFormatError, CheckpointError)):
            print(f"error: {exc}", file=sys.stderr)
            return EXIT_IO
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except OSError as exc:
        target = exc.filename or exc
        print(f"error: {exc.strerror or exc}: {target}" if exc.filename else f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


def main() -> None:
    sys.exit(run_cli())


if __name__ == "__main__":
    main()
