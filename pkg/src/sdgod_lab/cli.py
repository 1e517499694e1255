"""Command line entry point: ``sdgod-lab gen-data|corrupt|train|eval|report``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from . import runner


def _common(p, mode=False):
    p.add_argument("--config", help="INI file with [run], [detector], [augment], [prompts] sections")
    p.add_argument("--seed", type=int, help="master seed (overrides the config)")
    p.add_argument("--out", required=True, help="output directory")
    if mode:
        p.add_argument("--mode", choices=runner.MODES, help="ablation arm (overrides the config)")
        p.add_argument("--alpha", type=float, help="CRFI loss weight (overrides the config)")


def build_parser():
    ap = argparse.ArgumentParser(prog="sdgod-lab", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate the synthetic train/test splits")
    _common(p)

    p = sub.add_parser("corrupt", help="write the corruption suite for the test split")
    _common(p)
    p.add_argument("--data", required=True, help="dataset directory from gen-data")

    p = sub.add_parser("train", help="train one ablation arm")
    _common(p, mode=True)
    p.add_argument("--data", required=True)
    p.add_argument("--iterations", type=int)

    p = sub.add_parser("eval", help="evaluate a trained run on clean data and the corruption suite")
    p.add_argument("--config", help="config whose corruption/severity selection is evaluated")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, help="run directory from train; results are written here")
    p.add_argument("--data", required=True)
    p.add_argument("--suite", required=True)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("report", help="comparison table over evaluated runs")
    p.add_argument("runs", nargs="+", help="evaluated run directories")
    p.add_argument("--out", help="write the table here as well as to stdout")
    p.add_argument("--format", choices=("markdown", "csv"), default="markdown")
    return ap


def run(args):
    if args.command == "report":
        text = runner.cmd_report(args.runs, args.out, args.format)
        sys.stdout.write(text)
        return None
    overrides = {"seed": args.seed}
    if args.command == "train":
        overrides.update(mode=args.mode, alpha=args.alpha, iterations=args.iterations)
    cfg = runner.load_config(args.config, **overrides)
    if args.command == "gen-data":
        return runner.cmd_gen_data(cfg, args.out)
    if args.command == "corrupt":
        return runner.cmd_corrupt(cfg, args.data, args.out)
    if args.command == "train":
        return runner.cmd_train(cfg, args.data, args.out)
    return runner.cmd_eval(cfg, args.out, args.data, args.suite, args.workers)


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        result = run(args)
    except Exception as exc:  # reported as machine-readable JSON, never a traceback
        json.dump({"error": type(exc).__name__, "message": str(exc), "command": args.command}, sys.stderr)
        sys.stderr.write("\n")
        return 1
    if result is not None:
        print(json.dumps(result))
    return 0


if __name__ == "__main__":
    sys.exit(main())
