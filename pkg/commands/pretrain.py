import argparse
import logging
from pathlib import Path
from typing import List

import numpy as np

from commands import (EXIT_OK, add_config_arguments, finish_run_directory, positive_int,
                      resolve_config, run_directory)
from models import ModelParams
from schemas import MaskPlan, RunConfig
from services.checkpoint_service import load_checkpoint
from services.fusmae_model import forward_pretrain, patchify, unpatchify
from services.synth_data import Dataset, SamplePair, load_dataset
from services.training_service import pretrain_loop
from tensor import no_grad
from utils.export import write_loss_trace, write_pgm

logger = logging.getLogger(__name__)

CHECKPOINT_NAME = "checkpoint.fmck"
LOSS_TRACE_NAME = "loss.csv"
RECON_STREAM = 4


def register(subparsers) -> None:
    parser = subparsers.add_parser("pretrain", help="Pretrain a Fus-MAE variant on a dataset file")
    parser.add_argument("--data", required=True, help="dataset file written by gen-data")
    parser.add_argument("--variant", choices=["early_concat", "xad", "xaed"])
    parser.add_argument("--strategy", choices=["independent", "consistent"])
    parser.add_argument("--steps", type=positive_int, help="total optimizer steps")
    parser.add_argument("--lr", type=float, help="base learning rate")
    parser.add_argument("--batch-size", type=positive_int)
    parser.add_argument("--out", help="run directory (default: <output root>/pretrain-<variant>)")
    parser.add_argument("--resume", help="continue from this checkpoint")
    parser.add_argument("--dump-recon", type=int, default=0, metavar="K",
                        help="write PGM reconstructions of the first K samples after training")
    add_config_arguments(parser)
    parser.set_defaults(handler=handle)


def handle(args: argparse.Namespace) -> int:
    resume = load_checkpoint(args.resume) if args.resume else None
    flags = {
        "model.variant": args.variant,
        "model.strategy": args.strategy,
        "train.steps": args.steps,
        "train.lr": args.lr,
        "train.batch_size": args.batch_size,
        "output_dir": args.out,
    }
    config = resolve_config(args, flags, base=resume.config if resume else None)
    run_dir = run_directory(config, f"pretrain-{config.model.variant}")
    config = config.model_copy(update={"output_dir": str(run_dir)})
    finish_run_directory(config, run_dir)

    dataset = load_dataset(args.data)
    result = pretrain_loop(
        dataset, config,
        checkpoint_path=str(run_dir / CHECKPOINT_NAME),
        resume=resume,
        workers=args.workers,
    )
    write_loss_trace(result.trace, run_dir / LOSS_TRACE_NAME)
    if args.dump_recon > 0:
        dump_reconstructions(dataset, result.checkpoint.params, config, run_dir / "recon", args.dump_recon)

    summary = f"checkpoint={result.checkpoint_path} steps={result.checkpoint.step}"
    if result.trace:
        summary += f" final_loss={result.trace[-1].loss:.6f}"
    print(summary)
    return EXIT_OK


def masked_input(image: np.ndarray, masked: List[int], P: int) -> np.ndarray:
    """The input with its masked patches blanked to the image minimum."""
    H, W, C = image.shape
    with no_grad():
        patches = patchify(image, P).data.copy()
        patches[list(masked)] = image.min()
        return unpatchify(patches, H, W, C, P).data


def dump_reconstructions(dataset: Dataset, params: ModelParams, config: RunConfig, out_dir: Path, count: int) -> List[Path]:
    """input / masked / reconstruction PGMs (first channel) of both modalities for the first `count` samples."""
    rng = np.random.default_rng([config.seed, RECON_STREAM])
    written: List[Path] = []
    for i in range(min(count, len(dataset))):
        pair: SamplePair = dataset[i]
        with no_grad():
            out = forward_pretrain(pair, params, rng=rng)
        plan: MaskPlan = out.plan
        views = (
            ("s1", pair.image_1, plan.masked_1, out.reconstruction.image_1),
            ("s2", pair.image_2, plan.masked_2, out.reconstruction.image_2),
        )
        for name, image, masked, recon in views:
            written.append(write_pgm(image[..., 0], out_dir / f"sample{i:03d}_{name}_input.pgm", scale=4))
            written.append(write_pgm(masked_input(image, masked, config.model.P)[..., 0],
                                     out_dir / f"sample{i:03d}_{name}_masked.pgm", scale=4))
            written.append(write_pgm(recon[..., 0], out_dir / f"sample{i:03d}_{name}_recon.pgm", scale=4))
    logger.info(f"Wrote {len(written)} reconstruction images to {out_dir}")
    return written
