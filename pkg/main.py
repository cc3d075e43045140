import argparse
import logging
import sys
from typing import List, Optional

from commands import EXIT_NUMERIC, EXIT_USAGE, bench, evaluate, gen_data, grad_check, inspect_attention, pretrain
from config import settings
from errors import CheckpointError, ConfigError, DatasetError, MaskError, NumericError, ShapeError
from logging_config import setup_logging

logger = logging.getLogger(__name__)

COMMANDS = (gen_data, pretrain, evaluate, inspect_attention, grad_check, bench)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fusmae",
        description="Desk-scale multimodal (SAR + optical) masked autoencoder toolkit",
    )
    parser.add_argument("--log-dir", default=None, help=f"trace log directory (default: {settings.LOG_DIR})")
    parser.add_argument("--log-level", default=None, choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    subparsers = parser.add_subparsers(dest="command", required=True)
    for command in COMMANDS:
        command.register(subparsers)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)

    setup_logging(args.log_dir, args.log_level)
    logger.info(f"--- fusmae {args.command} ---")
    try:
        return args.handler(args)
    except NumericError as exc:
        logger.error(f"Numeric abort{f' in {exc.op}' if exc.op else ''}: {exc}")
        return EXIT_NUMERIC
    except (ConfigError, CheckpointError, DatasetError, ShapeError, MaskError) as exc:
        logger.error(f"{type(exc).__name__}: {exc}")
        return EXIT_USAGE
    except OSError as exc:
        logger.error(f"I/O failure: {exc}")
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
