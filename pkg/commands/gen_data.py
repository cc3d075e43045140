import argparse
import logging
from pathlib import Path

from commands import EXIT_OK, add_config_arguments, positive_int, resolve_config
from config import settings
from services.synth_data import gen_dataset

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("gen-data", help="Generate a synthetic SAR/optical dataset file")
    parser.add_argument("--n", type=positive_int, help="number of samples")
    parser.add_argument("--out", help="dataset path (default: <output root>/data/train.fmds)")
    add_config_arguments(parser)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    config = resolve_config(args, {"data.n": args.n})
    out = args.out or str(Path(settings.OUTPUT_ROOT) / "data" / "train.fmds")
    manifest = gen_dataset(config.data.n, config.seed, config.model, config.data, out, workers=args.workers)
    print(f"{manifest.checksum}  {manifest.path}")
    return EXIT_OK
