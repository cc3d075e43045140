"""
bench: gen-data -> pretrain (every variant) -> probe, collected into one
comparison table with a row per model and a column per
(label fraction, modality condition).
"""
import argparse
import logging
from pathlib import Path
from typing import Dict, List

import numpy as np

from commands import (EXIT_OK, add_config_arguments, finish_run_directory, fraction, positive_int,
                      resolve_config, run_directory)
from models import ModelParams, init_params
from schemas import MetricsReport, RunConfig
from services.evaluation_service import probe_checkpoint
from services.synth_data import gen_dataset, load_dataset
from services.training_service import INIT_STREAM, pretrain_loop
from utils.export import write_loss_trace, write_metrics, write_rows

logger = logging.getLogger(__name__)

VARIANTS = ("early_concat", "xad", "xaed")
MODALITIES = ("s1", "s2", "s1s2")
BENCH_NOTE = "desk-scale synthetic data; values are not comparable to full-scale results"
TEST_SEED_OFFSET = 1_000_003


def register(subparsers) -> None:
    parser = subparsers.add_parser("bench", help="Pretrain every variant and compare linear-probe mAP")
    parser.add_argument("--n", type=positive_int, help="training samples")
    parser.add_argument("--n-test", type=positive_int, default=512, help="held-out samples")
    parser.add_argument("--steps", type=positive_int, help="pretraining steps per variant")
    parser.add_argument("--strategy", choices=["independent", "consistent"])
    parser.add_argument("--low-fraction", type=fraction, default=0.05,
                        help="label fraction of the label-scarce column group")
    parser.add_argument("--variants", nargs="+", choices=VARIANTS, default=list(VARIANTS))
    parser.add_argument("--out", help="bench directory")
    add_config_arguments(parser)
    parser.set_defaults(handler=handle)


def column_name(group: str, modality: str) -> str:
    return f"mAP_{group}_{modality}"


def comparison_rows(reports: List[MetricsReport]) -> List[Dict[str, object]]:
    """Pivot probe reports (label = "<model>@<group>") into one row per model."""
    rows: Dict[str, Dict[str, object]] = {}
    for report in reports:
        model, group = report.label.split("@", 1)
        row = rows.setdefault(model, {"model": model})
        row[column_name(group, report.modality)] = report.mAP
    for row in rows.values():
        row["note"] = BENCH_NOTE
    return list(rows.values())


def comparison_columns(fractions: Dict[str, float]) -> List[str]:
    return ["model"] + [column_name(g, m) for g in fractions for m in MODALITIES] + ["note"]


def _probe_all(params: ModelParams, model_name: str, train, test, config: RunConfig,
               fractions: Dict[str, float], workers) -> List[MetricsReport]:
    reports = []
    for group, frac in fractions.items():
        probe_config = config.model_copy(update={"eval": config.eval.model_copy(update={"label_fraction": frac})})
        for modality in MODALITIES:
            result = probe_checkpoint(params, train, test, "multilabel", probe_config, modality=modality,
                                      workers=workers, label=f"{model_name}@{group}")
            reports.append(result.report)
    return reports


def handle(args: argparse.Namespace) -> int:
    flags = {"data.n": args.n, "train.steps": args.steps, "model.strategy": args.strategy, "output_dir": args.out}
    config = resolve_config(args, flags)
    bench_dir = run_directory(config, "bench")
    config = config.model_copy(update={"output_dir": str(bench_dir)})
    finish_run_directory(config, bench_dir)

    train_path = bench_dir / "data" / "train.fmds"
    test_path = bench_dir / "data" / "test.fmds"
    gen_dataset(config.data.n, config.seed, config.model, config.data, str(train_path), workers=args.workers)
    gen_dataset(args.n_test, config.seed + TEST_SEED_OFFSET, config.model, config.data, str(test_path),
                workers=args.workers)
    train, test = load_dataset(str(train_path)), load_dataset(str(test_path))

    fractions = {"full": 1.0, "low": args.low_fraction}
    reports: List[MetricsReport] = []
    for variant in args.variants:
        run_config = config.model_copy(update={
            "model": config.model.model_copy(update={"variant": variant}),
            "output_dir": str(bench_dir / variant),
        })
        run_dir = Path(run_config.output_dir)
        finish_run_directory(run_config, run_dir)
        result = pretrain_loop(train, run_config, checkpoint_path=str(run_dir / "checkpoint.fmck"),
                               workers=args.workers)
        write_loss_trace(result.trace, run_dir / "loss.csv")
        reports += _probe_all(result.checkpoint.params, variant, train, test, run_config, fractions, args.workers)

    random_model = config.model.model_copy(update={"variant": "xaed"})
    random_params = init_params(random_model, np.random.default_rng([config.seed, INIT_STREAM]))
    reports += _probe_all(random_params, "random_init", train, test, config, fractions, args.workers)

    write_metrics(reports, bench_dir / "metrics.csv")
    out = write_rows(comparison_rows(reports), bench_dir / "comparison.csv",
                     columns=comparison_columns(fractions))
    print(f"comparison table: {out}")
    return EXIT_OK
