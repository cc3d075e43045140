"""
Subcommands of the `fusmae` command line. Each module exposes
`register(subparsers)`, which adds its parser and binds `handler`.

Handlers return a process exit code:
    0 success, 1 check failure, 2 usage / config error, 3 numeric abort.
"""
import argparse
import logging
from pathlib import Path
from typing import Dict, List, Optional

from config import resolve_run_config, settings, write_run_config
from errors import ConfigError
from schemas import RunConfig

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def positive_int(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}")
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {value}")
    return value


def fraction(text: str) -> float:
    try:
        value = float(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected a number, got {text!r}")
    if not 0.0 < value <= 1.0:
        raise argparse.ArgumentTypeError(f"expected a value in (0, 1], got {value}")
    return value


def add_config_arguments(parser: argparse.ArgumentParser) -> None:
    """--config FILE and repeated --set section.key=value overrides."""
    parser.add_argument("--config", help="key=value config file (flags take precedence)")
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override any config key, e.g. --set model.d=32")
    parser.add_argument("--seed", type=int, help="run seed")
    parser.add_argument("--workers", type=positive_int, help="worker threads (default: FUSMAE_NUM_WORKERS)")


def parse_set_flags(items: List[str]) -> Dict[str, str]:
    overrides: Dict[str, str] = {}
    for item in items:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def resolve_config(args: argparse.Namespace, flags: Dict[str, Optional[object]],
                   base: Optional[RunConfig] = None) -> RunConfig:
    """Defaults (or `base`) < --config file < --set < dedicated flags."""
    overrides = parse_set_flags(getattr(args, "set", []) or [])
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    overrides.update({key: str(value) for key, value in flags.items() if value is not None})
    return resolve_run_config(config_file=getattr(args, "config", None), overrides=overrides, base=base)


def run_directory(config: RunConfig, default_name: str) -> Path:
    directory = Path(config.output_dir) if config.output_dir else Path(settings.OUTPUT_ROOT) / default_name
    directory.mkdir(parents=True, exist_ok=True)
    return directory


def finish_run_directory(config: RunConfig, directory: Path) -> None:
    path = write_run_config(config.model_copy(update={"output_dir": str(directory)}), str(directory))
    logger.info(f"Resolved configuration written to {path}")
