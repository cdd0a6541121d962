"""Main entry point for the taxis lab CLI."""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from .config import config
from .handlers import COMMANDS


def setup_logging(level: Optional[str] = None) -> None:
    """Set up logging configuration."""
    log_format = "%(asctime)s - %(name)s - %(levelname)s - %(message)s"

    # Configure root logger; stdout carries reports only
    logging.basicConfig(
        level=getattr(logging, (level or config.log_level).upper(), logging.INFO),
        format=log_format,
        handlers=[logging.StreamHandler(sys.stderr)],
    )

    # Add file handler if log file is specified
    if config.log_file:
        # Ensure log directory exists
        log_path = Path(config.log_file)
        log_path.parent.mkdir(parents=True, exist_ok=True)

        file_handler = logging.FileHandler(config.log_file)
        file_handler.setFormatter(logging.Formatter(log_format))
        logging.getLogger().addHandler(file_handler)

    # Set specific logger levels
    logging.getLogger("peewee").setLevel(logging.WARNING)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="run configuration file (key = value lines)")
    common.add_argument("--out", help="output directory (DGT_OUT overrides)")
    common.add_argument("--jobs", type=int, help="maximum concurrent member runs")
    common.add_argument("--seed", type=int, help="override the configured seed")
    common.add_argument("--log-level", help="DEBUG, INFO, WARNING or ERROR")

    parser = argparse.ArgumentParser(
        prog="taxis-lab",
        description="Simulate and audit the regularized doubly degenerate nutrient-taxis system.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("simulate", parents=[common], help="run one simulation and audit it")
    audit = sub.add_parser("audit", parents=[common], help="re-run audits on a persisted series")
    audit.add_argument("--series", help="series CSV written by simulate")
    audit.add_argument("--consts", help="constants file written by simulate")
    sub.add_parser("lab", parents=[common], help="fit and validate inequality constants")
    sub.add_parser("converge", parents=[common], help="run the eps x grid convergence study")
    dump = sub.add_parser("snapshot-dump", parents=[common], help="pretty-print a .dgt snapshot")
    dump.add_argument("path", help="snapshot file")
    return parser


def main(argv: Optional[List[str]] = None) -> None:
    """Parse arguments, dispatch the subcommand and exit with its status."""
    args = build_parser().parse_args(argv)
    setup_logging(args.log_level)
    logger = logging.getLogger(__name__)

    try:
        status = COMMANDS[args.command](args)
    except KeyboardInterrupt:
        logger.info("Interrupted by user")
        status = 130
    sys.exit(status)


if __name__ == "__main__":
    main()
