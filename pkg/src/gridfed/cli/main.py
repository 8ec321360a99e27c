"""``gridfed`` command line entry point.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 runtime
failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path as FsPath

from filelock import FileLock, Timeout

from ..errors import GridFedError, ValidationError
from ..federation import STRATEGIES
from . import commands
from .config import ConfigError, RunConfig, load_config

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def _float_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--out", help="output directory (overrides config)")

    p = argparse.ArgumentParser(prog="gridfed", description="Federated gridworld navigation experiments.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("gen-data", parents=[common], help="generate environments and episodes")

    t = sub.add_parser("train", parents=[common], help="train the navigation agent")
    t.add_argument("--mode", choices=commands.MODES, default="federated")
    t.add_argument("--data-kind", choices=commands.DATA_KINDS, default="original")
    t.add_argument("--resume", action="store_true", help="continue from the last saved round")

    s = sub.add_parser("train-speaker", parents=[common], help="train the speaker")
    s.add_argument("--mode", choices=commands.MODES, default="federated")

    a = sub.add_parser("augment", parents=[common], help="speaker-label extra seen routes")
    a.add_argument("--speaker", help="speaker checkpoint (default: speaker-federated.ckpt)")

    pe = sub.add_parser("pre-explore", parents=[common], help="adapt to unseen environments")
    pe.add_argument("--strategy", choices=STRATEGIES, required=True)
    pe.add_argument("--agent", help="agent checkpoint (default: agent-federated-original.ckpt)")
    pe.add_argument("--speaker", help="speaker checkpoint (default: speaker-federated.ckpt)")

    e = sub.add_parser("evaluate", parents=[common], help="evaluate a checkpoint or client folder")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--split", choices=("seen_val", "unseen_val"), default="unseen_val")

    sw = sub.add_parser("sweep-epochs", parents=[common], help="rounds-to-target per local epoch count")
    sw.add_argument("--epochs", type=_int_list, default=[1, 3, 8])
    sw.add_argument("--targets", type=_float_list, default=[0.3, 0.4, 0.5])

    sub.add_parser("compare", parents=[common], help="tabulate all reports")
    return p


def run(args: argparse.Namespace, cfg: RunConfig):
    c = args.command
    if c == "gen-data":
        return commands.cmd_gen_data(cfg)
    if c == "train":
        return commands.cmd_train(cfg, args.mode, args.data_kind, args.resume)
    if c == "train-speaker":
        return commands.cmd_train_speaker(cfg, args.mode)
    if c == "augment":
        return commands.cmd_augment(cfg, args.speaker)
    if c == "pre-explore":
        return commands.cmd_pre_explore(cfg, args.strategy, args.agent, args.speaker)
    if c == "evaluate":
        return commands.cmd_evaluate(cfg, args.checkpoint, args.split)
    if c == "sweep-epochs":
        table = commands.cmd_sweep_epochs(cfg, args.epochs, args.targets)
        return commands.format_sweep(table, args.targets)
    if c == "compare":
        return commands.cmd_compare(cfg)
    raise ValidationError(f"unknown command {c!r}")


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    # Everything is validated before the output directory is touched.
    try:
        if args.config and not FsPath(args.config).exists():
            raise ConfigError(f"config file {args.config} does not exist")
        cfg = load_config(args.config, seed=args.seed, out=args.out)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG

    out = FsPath(cfg.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        lock = FileLock(str(out / ".gridfed.lock"), timeout=0)
        with lock:
            result = run(args, cfg)
    except Timeout:
        print(f"error: another process owns {out}", file=sys.stderr)
        return EXIT_RUNTIME
    except commands.MissingArtifactError as exc:
        print(f"missing artifact: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (GridFedError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    if isinstance(result, str):
        print(result, end="")
    else:
        print(json.dumps(result, indent=2, sort_keys=True, default=str))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
