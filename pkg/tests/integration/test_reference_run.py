"""
Desk-scale regression runs at the default configuration: 2048 synthetic
32x32 pairs, batch 64, 300 steps, base_lr 1.5625e-4.

Each pretraining run takes a few minutes single-threaded; select with
`-m slow`.
"""
from typing import Dict, Tuple

import numpy as np
import pytest

from commands.bench import TEST_SEED_OFFSET
from models import ModelParams, init_params
from schemas import ModelConfig, RunConfig
from services.evaluation_service import finetune, probe_checkpoint
from services.synth_data import Dataset, gen_dataset, load_dataset
from services.training_service import INIT_STREAM, TrainResult, pretrain_loop, window_means

pytestmark = [pytest.mark.integration, pytest.mark.slow]

DATA_SEED = 7


def reference_config(variant: str = "xaed", seed: int = 0) -> RunConfig:
    return RunConfig(model=ModelConfig(variant=variant), seed=seed)


@pytest.fixture(scope="module")
def reference_splits(tmp_path_factory) -> Tuple[Dataset, Dataset]:
    config = reference_config()
    root = tmp_path_factory.mktemp("reference")
    gen_dataset(config.data.n, DATA_SEED, config.model, config.data, str(root / "train.fmds"), workers=1)
    gen_dataset(512, DATA_SEED + TEST_SEED_OFFSET, config.model, config.data, str(root / "test.fmds"), workers=1)
    return load_dataset(str(root / "train.fmds")), load_dataset(str(root / "test.fmds"))


@pytest.fixture(scope="module")
def pretrained(reference_splits):
    """Pretraining runs keyed by (variant, seed), each trained once per module."""
    runs: Dict[Tuple[str, int], TrainResult] = {}

    def get(variant: str, seed: int = 0) -> TrainResult:
        if (variant, seed) not in runs:
            runs[(variant, seed)] = pretrain_loop(reference_splits[0], reference_config(variant, seed), workers=1)
        return runs[(variant, seed)]
    return get


def random_encoder(seed: int) -> ModelParams:
    config = reference_config(seed=seed)
    return init_params(config.model, np.random.default_rng([seed, INIT_STREAM]))


class TestConvergence:
    """Test the reference pretraining run of every variant."""

    @pytest.mark.parametrize("variant", ["early_concat", "xad", "xaed"])
    def test_smoothed_loss_halves(self, pretrained, variant):
        """Test final smoothed loss below half the initial smoothed loss."""
        config = reference_config(variant)
        result = pretrained(variant)
        assert len(result.trace) == config.train.steps
        first, last = window_means(result.trace, config.train.smoothing_window)
        assert np.isfinite(first) and np.isfinite(last)
        assert last < 0.5 * first, f"{variant}: first {first:.4f}, last {last:.4f}, ratio {last / first:.3f}"


class TestRepresentationQuality:
    """Test downstream use of the pretrained xaed encoder."""

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_pretrained_beats_random_init(self, pretrained, reference_splits, seed):
        """Test frozen-feature linear classifiers on pretrained vs. initial weights for both tasks."""
        train, test = reference_splits
        config = reference_config(seed=seed)
        trained_params = pretrained("xaed", seed).checkpoint.params
        initial_params = random_encoder(seed)

        trained = probe_checkpoint(trained_params, train, test, "multilabel", config, workers=1, label="pretrained")
        initial = probe_checkpoint(initial_params, train, test, "multilabel", config, workers=1, label="random_init")
        assert trained.report.mAP > initial.report.mAP, (trained.report.mAP, initial.report.mAP)

        trained = probe_checkpoint(trained_params, train, test, "single", config, workers=1, label="pretrained")
        initial = probe_checkpoint(initial_params, train, test, "single", config, workers=1, label="random_init")
        assert trained.report.top1 > initial.report.top1, (trained.report.top1, initial.report.top1)

    def test_finetune_not_worse_than_frozen(self, pretrained, reference_splits):
        """Test that training every weight matches or beats the frozen linear classifier."""
        train, test = reference_splits
        config = reference_config()
        params = pretrained("xaed").checkpoint.params
        frozen = probe_checkpoint(params, train, test, "multilabel", config, workers=1, label="frozen")
        tuned = finetune(params, train, test, "multilabel", config, workers=1, label="finetune")
        assert tuned.report.mAP >= frozen.report.mAP, (tuned.report.mAP, frozen.report.mAP)
