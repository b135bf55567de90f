# circuitlab/main.py - Command-line entry point; every subcommand group registers itself here

import argparse
import logging
import sys
from typing import List, Optional

from circuitlab import __version__
from circuitlab.cli import (
    commands_circuits,
    commands_data,
    commands_interventions,
    commands_probe,
    commands_report,
    commands_train,
)
from circuitlab.core.config import settings
from circuitlab.core.errors import CircuitLabError
from circuitlab.core.monitoring import monitoring

logger = logging.getLogger(__name__)

COMMAND_GROUPS = (
    commands_data,
    commands_train,
    commands_circuits,
    commands_interventions,
    commands_probe,
    commands_report,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="circuitlab",
        description="desk-scale circuit discovery and interventions for a toy arithmetic-checking transformer",
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("--log-level", default=None, help=f"default {settings.LOG_LEVEL}")
    subparsers = parser.add_subparsers(dest="command", metavar="COMMAND")
    subparsers.required = True
    for group in COMMAND_GROUPS:
        group.register(subparsers)
    return parser


def cli_dispatch(argv: Optional[List[str]] = None) -> int:
    """Run one subcommand; returns 0 on success, 1 on failure, 2 on a usage error"""
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 0 for --help/--version and 2 for usage errors
        return int(exc.code or 0)
    args.argv = argv

    logging.basicConfig(
        level=(args.log_level or settings.LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.handler(args)
    except (CircuitLabError, FileNotFoundError, ValueError) as exc:
        monitoring.record_error(str(exc), context=args.command)
        logger.error(f"{args.command} failed: {exc}")
        sys.stderr.write(f"error: {exc}\n")
        return 1


def main():
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
