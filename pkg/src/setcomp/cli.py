"""Command-line experiment runner.

    setcomp <command> --config <path> [--seed N] [--out DIR]

Commands: train, eval, report, render-preview.
Exit codes: 0 success, 1 runtime failure, 2 invalid config.
"""

from __future__ import annotations

import argparse
import os
import sys
from contextlib import contextmanager

from .experiments import ConfigError, load_config, run_eval, run_preview, run_report, run_train

COMMANDS = ("train", "eval", "report", "render-preview")


@contextmanager
def _output_lock(out_dir: str):
    """One experiment process at a time per output directory."""
    os.makedirs(out_dir, exist_ok=True)
    lock_path = os.path.join(out_dir, ".lock")
    try:
        fd = os.open(lock_path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise RuntimeError(
            f"output directory {out_dir!r} is locked by another run "
            f"(remove {lock_path} if that run is dead)"
        ) from None
    try:
        os.write(fd, f"pid={os.getpid()}\n".encode())
        os.close(fd)
        yield
    finally:
        if os.path.exists(lock_path):
            os.remove(lock_path)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setcomp", description="Compositional set-embedding experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        cmd = sub.add_parser(name)
        cmd.add_argument("--config", required=True, help="flat key=value experiment config")
        cmd.add_argument("--seed", type=int, default=None, help="override the config seed")
        cmd.add_argument("--out", default=None, help="override the output directory")
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides={"seed": args.seed, "out_dir": args.out})
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2

    stage = {"train": run_train, "eval": run_eval, "report": run_report, "render-preview": run_preview}[args.command]
    try:
        with _output_lock(cfg.out_dir):
            stage(cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:
        print(f"{args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
