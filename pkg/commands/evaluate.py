"""probe / finetune: downstream evaluation of a pretrained (or random) encoder."""
import argparse
import logging
from typing import Tuple

import numpy as np

from commands import EXIT_OK, add_config_arguments, finish_run_directory, fraction, resolve_config, run_directory
from models import ModelParams, init_params
from schemas import RunConfig
from services.checkpoint_service import check_compatible, load_checkpoint
from services.evaluation_service import finetune, probe_checkpoint
from services.synth_data import Dataset, load_dataset
from services.training_service import INIT_STREAM
from utils.export import write_metrics, write_report_text

logger = logging.getLogger(__name__)

HELD_OUT_FRACTION = 0.2


def _add_arguments(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--ckpt", help="pretrained checkpoint")
    source.add_argument("--random-init", action="store_true",
                        help="evaluate a randomly initialized encoder (baseline)")
    parser.add_argument("--variant", choices=["early_concat", "xad", "xaed"],
                        help="architecture for --random-init")
    parser.add_argument("--data", required=True, help="training split dataset file")
    parser.add_argument("--test-data", help="held-out dataset file (default: seeded 20%% split of --data)")
    parser.add_argument("--modality", choices=["s1", "s2", "s1s2"], default="s1s2")
    parser.add_argument("--task", choices=["multilabel", "single"], default="multilabel")
    parser.add_argument("--label-fraction", type=fraction, help="fraction of training labels used")
    parser.add_argument("--label", help="row label in the metrics CSV")
    parser.add_argument("--out", help="output directory")
    add_config_arguments(parser)


def register(subparsers) -> None:
    probe = subparsers.add_parser("probe", help="Linear probe on frozen CLS features")
    _add_arguments(probe)
    probe.set_defaults(handler=handle_probe, mode="probe")

    tune = subparsers.add_parser("finetune", help="Fine-tune the encoder with a linear head")
    _add_arguments(tune)
    tune.set_defaults(handler=handle_finetune, mode="finetune")


def load_encoder(args: argparse.Namespace) -> Tuple[RunConfig, ModelParams]:
    flags = {"eval.label_fraction": args.label_fraction, "output_dir": args.out}
    if args.random_init:
        flags["model.variant"] = args.variant
        config = resolve_config(args, flags)
        params = init_params(config.model, np.random.default_rng([config.seed, INIT_STREAM]))
        return config, params

    if args.variant is not None:
        flags["model.variant"] = args.variant
    checkpoint = load_checkpoint(args.ckpt)
    config = resolve_config(args, flags, base=checkpoint.config)
    check_compatible(checkpoint, config.model, source=args.ckpt)
    return config, checkpoint.params


def load_splits(args: argparse.Namespace, config: RunConfig) -> Tuple[Dataset, Dataset]:
    train = load_dataset(args.data)
    train.check_compatible(config.model)
    if args.test_data:
        test = load_dataset(args.test_data)
        test.check_compatible(config.model)
        return train, test
    logger.info(f"No --test-data given; holding out a seeded {HELD_OUT_FRACTION:.0%} of {args.data}")
    return train.split(HELD_OUT_FRACTION, config.seed)


def _default_label(args: argparse.Namespace, config: RunConfig) -> str:
    if args.label:
        return args.label
    return "random_init" if args.random_init else config.model.variant


def _run(args: argparse.Namespace, mode: str) -> int:
    config, params = load_encoder(args)
    train, test = load_splits(args, config)
    label = _default_label(args, config)
    run_dir = run_directory(config, f"{mode}-{label}-{args.task}-{args.modality}")
    config = config.model_copy(update={"output_dir": str(run_dir)})
    finish_run_directory(config, run_dir)

    if mode == "probe":
        result = probe_checkpoint(params, train, test, args.task, config, modality=args.modality,
                                  workers=args.workers, label=label)
    else:
        result = finetune(params, train, test, args.task, config, modality=args.modality,
                          workers=args.workers, label=label)

    write_report_text(result.report, run_dir / "report.txt")
    write_metrics([result.report], run_dir / "metrics.csv")
    print(result.report.to_text(), end="")
    return EXIT_OK


def handle_probe(args: argparse.Namespace) -> int:
    return _run(args, "probe")


def handle_finetune(args: argparse.Namespace) -> int:
    return _run(args, "finetune")

