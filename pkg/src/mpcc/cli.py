"""Command-line entry point: ``mpcc <subcommand> [flags]``.

Errors exit with status 2 and a single line ``error kind=<kind> message=<json string>``.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import pipeline
from .config import MODES, STRATEGIES, describe, load_config
from .errors import ConfigError, MPCCError

COMMANDS = ("genworld", "gendata", "genbench", "train", "eval", "score-external", "report")


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigError(message)


def _parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="key = value config file")
    common.add_argument("--seed", type=int, help="master seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("--strategy", choices=STRATEGIES, help="fine-tuning strategy")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key; repeatable")
    p = _Parser(
        prog="mpcc", formatter_class=argparse.RawDescriptionHelpFormatter,
        description="Masked-scene context completion: data, training, evaluation.",
        epilog="config keys (key = default):\n" + describe())
    sub = p.add_subparsers(dest="command", required=True, metavar="command", parser_class=_Parser)
    sub.add_parser("genworld", parents=[common], help="build the synthetic world")
    sub.add_parser("gendata", parents=[common], help="generate the dataset splits")
    sub.add_parser("genbench", parents=[common], help="build the choice questions")
    sub.add_parser("train", parents=[common], help="train the configured strategy")
    ev = sub.add_parser("eval", parents=[common], help="score a policy on the benchmark")
    ev.add_argument("--checkpoint", help="checkpoint to evaluate (default: the run's own)")
    ev.add_argument("--mode", choices=MODES, help="how the policy picks an option")
    se = sub.add_parser("score-external", help="score an external answers file")
    se.add_argument("questions", help="question file (JSON lines)")
    se.add_argument("answers", help="answers file (JSON lines)")
    se.add_argument("--output", help="write the CSV here instead of stdout")
    rp = sub.add_parser("report", help="compare strategies across manifests")
    rp.add_argument("manifests", nargs="+", help="manifest.json files or run directories")
    rp.add_argument("--output", help="write the CSV here instead of stdout")
    return p


def _config(args):
    overrides = {}
    for item in args.set:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        overrides[k.strip()] = v.strip()
    for flag, key in (("seed", "seed"), ("out", "out"), ("strategy", "strategy")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    return load_config(args.config, overrides)


def _emit(text: str, output: str | None) -> None:
    if output:
        Path(output).write_text(text)
    else:
        sys.stdout.write(text)


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    if args.command == "score-external":
        _emit(pipeline.cmd_score_external(args.questions, args.answers), args.output)
        return 0
    if args.command == "report":
        _emit(pipeline.cmd_report(args.manifests), args.output)
        return 0
    cfg = _config(args)
    if args.command == "genworld":
        print(pipeline.cmd_genworld(cfg))
    elif args.command == "gendata":
        for path in pipeline.cmd_gendata(cfg).values():
            print(path)
    elif args.command == "genbench":
        for path in pipeline.cmd_genbench(cfg).values():
            print(path)
    elif args.command == "train":
        ckpt = pipeline.cmd_train(cfg)
        print(ckpt if ckpt is not None else "evaluation-only strategy; nothing trained")
    elif args.command == "eval":
        for path in pipeline.cmd_eval(cfg, args.checkpoint, args.mode).values():
            print(path)
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except MPCCError as exc:
        print(f"error kind={exc.kind} message={json.dumps(str(exc))}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error kind=input message={json.dumps(str(exc))}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
