"""Command-line entry point."""
import argparse
import logging
import sys
from typing import List, Optional

from rapidsim.commands.debug import register as register_debug
from rapidsim.commands.faults import register as register_faults
from rapidsim.commands.runs import register as register_runs
from rapidsim.commands.sweeps import register as register_sweeps
from rapidsim.config import LOG_LEVEL
from rapidsim.errors import RapidSimError, UsageError


class _Parser(argparse.ArgumentParser):
    """Usage errors become exceptions so they share the error line and exit code."""

    def error(self, message: str) -> None:
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="rapidsim", description="LLM training and inference performance simulator")
    subparsers = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    register_runs(subparsers)
    register_sweeps(subparsers)
    register_faults(subparsers)
    register_debug(subparsers)
    return parser


def _configure_logging(verbose: int) -> None:
    level = {0: LOG_LEVEL, 1: "INFO"}.get(verbose, "DEBUG")
    logging.basicConfig(level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s", force=True)


def main(argv: Optional[List[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _configure_logging(args.verbose)
        return args.handler(args)
    except RapidSimError as e:
        print(f"rapidsim: error code={e.code} exit={e.exit_code}: {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
