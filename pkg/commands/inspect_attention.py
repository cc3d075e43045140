import argparse
import logging
from pathlib import Path

from commands import EXIT_OK, add_config_arguments, finish_run_directory, resolve_config, run_directory
from errors import ConfigError
from services.checkpoint_service import load_checkpoint
from services.diagnostics_service import AttentionInspection, inspect_attention
from services.synth_data import load_dataset
from utils.export import write_matrix, write_pgm, write_rows

logger = logging.getLogger(__name__)


def register(subparsers) -> None:
    parser = subparsers.add_parser("inspect-attention", help="Dump attention maps of one unmasked forward pass")
    parser.add_argument("--ckpt", required=True)
    parser.add_argument("--data", required=True)
    parser.add_argument("--sample", type=int, default=0, help="sample index in --data")
    parser.add_argument("--out", help="output directory")
    add_config_arguments(parser)
    parser.set_defaults(handler=handle)


def export_inspection(inspection: AttentionInspection, out_dir: Path) -> int:
    """Per-head CSV + PGM for every captured map, and the within-modality mass table."""
    written = 0
    for amap in inspection.maps:
        tag = amap.tag.replace(".", "_")
        for head, weights in enumerate(amap.weights):
            write_matrix(weights, out_dir / f"{tag}_head{head}.csv")
            write_pgm(weights, out_dir / f"{tag}_head{head}.pgm", scale=4)
            written += 1

    if inspection.within_modality_mass is not None:
        rows = [
            {"block": inspection.self_attention_tag, "head": head, "within_modality_mass": float(mass),
             "uniform_baseline": inspection.uniform_baseline}
            for head, mass in enumerate(inspection.within_modality_mass)
        ]
        write_rows(rows, out_dir / "within_modality_mass.csv",
                   columns=["block", "head", "within_modality_mass", "uniform_baseline"])
    return written


def handle(args: argparse.Namespace) -> int:
    checkpoint = load_checkpoint(args.ckpt)
    config = resolve_config(args, {"output_dir": args.out}, base=checkpoint.config)
    dataset = load_dataset(args.data)
    dataset.check_compatible(checkpoint.config.model)
    if not 0 <= args.sample < len(dataset):
        raise ConfigError(f"--sample {args.sample} is out of range for {len(dataset)} samples")

    run_dir = run_directory(config, f"attention-{checkpoint.config.model.variant}-sample{args.sample}")
    finish_run_directory(config, run_dir)
    inspection = inspect_attention(dataset[args.sample], checkpoint.params)
    count = export_inspection(inspection, run_dir)

    print(f"{count} attention maps written to {run_dir}")
    if inspection.within_modality_mass is not None:
        masses = " ".join(f"{m:.4f}" for m in inspection.within_modality_mass)
        print(f"within-modality mass per head ({inspection.self_attention_tag}): {masses} "
              f"(uniform {inspection.uniform_baseline:.4f})")
    return EXIT_OK
