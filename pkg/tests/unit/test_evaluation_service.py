"""
Unit tests for the linear probe and fine-tuning.
"""
import numpy as np
import pytest

from errors import ShapeError
from schemas import EvalConfig
from services.evaluation_service import (extract_feature_matrix, finetune, label_subset, linear_probe,
                                         probe_checkpoint, warn_absent_classes)
from tests.utils.test_helpers import tiny_run


def separable_features(rng, n, K=3, d=6):
    labels = np.arange(n) % K
    centers = rng.normal(scale=10.0, size=(K, d))
    return centers[labels] + rng.normal(scale=0.5, size=(n, d)), labels


class TestLabelSubset:
    """Test the label-fraction subset."""

    def test_size_and_order(self):
        """Test ceil(fraction * n) sorted indices."""
        keep = label_subset(100, 0.05, seed=3)
        assert len(keep) == 5
        assert list(keep) == sorted(keep)

    def test_at_least_one(self):
        """Test that tiny fractions keep one sample."""
        assert len(label_subset(10, 0.01, seed=0)) == 1

    def test_seeded(self):
        """Test that the subset depends on the seed only."""
        np.testing.assert_array_equal(label_subset(50, 0.2, 1), label_subset(50, 0.2, 1))
        assert not np.array_equal(label_subset(50, 0.2, 1), label_subset(50, 0.2, 2))

    def test_absent_class_warning(self, caplog):
        """Test the warning for a class missing from the train split."""
        assert warn_absent_classes(np.array([0, 0, 2]), "single", K=3) == [1]
        assert "no examples" in caplog.text


class TestLinearProbe:
    """Test the linear head on fixed features."""

    def test_separable_single_label(self, rng):
        """Test near-perfect accuracy on well separated clusters."""
        x_train, y_train = separable_features(rng, 150)
        x_test, y_test = x_train[:60] + rng.normal(scale=0.1, size=(60, 6)), y_train[:60]
        config = EvalConfig(single_epochs=30, single_batch_size=16)
        result = linear_probe(x_train, y_train, x_test, y_test, task="single", eval_config=config, K=3)
        assert result.report.top1 >= 0.95
        assert result.weight.shape == (6, 3)

    def test_separable_multilabel(self, rng):
        """Test ranking quality on one-hot multilabel targets."""
        x, labels = separable_features(rng, 120)
        targets = np.eye(3, dtype=np.int64)[labels]
        config = EvalConfig(probe_epochs=30, probe_batch_size=16)
        result = linear_probe(x, targets, x, targets, task="multilabel", eval_config=config)
        assert result.report.mAP >= 0.95
        assert len(result.report.per_class_ap) == 3

    def test_loss_decreases(self, rng):
        """Test that the epoch loss falls."""
        x, labels = separable_features(rng, 64)
        config = EvalConfig(single_epochs=10, single_batch_size=16)
        result = linear_probe(x, labels, x, labels, task="single", eval_config=config, K=3)
        assert result.losses[-1] < result.losses[0]

    def test_deterministic(self, rng):
        """Test that the same seed fits the same head."""
        x, labels = separable_features(rng, 40)
        config = EvalConfig(single_epochs=3, single_batch_size=8, label_fraction=0.5)
        a = linear_probe(x, labels, x, labels, task="single", eval_config=config, seed=4, K=3)
        b = linear_probe(x, labels, x, labels, task="single", eval_config=config, seed=4, K=3)
        np.testing.assert_array_equal(a.weight, b.weight)

    def test_feature_width_mismatch(self, rng):
        """Test train / test feature width validation."""
        with pytest.raises(ShapeError):
            linear_probe(np.zeros((4, 3)), np.zeros(4, int), np.zeros((4, 2)), np.zeros(4, int),
                         task="single", eval_config=EvalConfig(), K=2)


class TestCheckpointEvaluation:
    """Test probing and fine-tuning a tiny encoder."""

    def test_features_in_dataset_order(self, dataset, params):
        """Test one CLS row per sample, same with threads."""
        one = extract_feature_matrix(dataset, params, workers=1)
        three = extract_feature_matrix(dataset, params, workers=3)
        assert one.shape == (len(dataset), params.config.d)
        np.testing.assert_array_equal(one, three)

    def test_probe_keeps_encoder_frozen(self, dataset, params):
        """Test that probing leaves encoder bytes unchanged."""
        before = {name: t.data.tobytes() for name, t in params.items()}
        train, test = dataset.split(0.25, seed=0)
        result = probe_checkpoint(params, train, test, "multilabel", tiny_run(), modality="s2")
        assert {name: t.data.tobytes() for name, t in params.items()} == before
        assert result.report.modality == "s2"
        assert 0.0 <= result.report.mAP <= 1.0

    def test_single_label_probe(self, dataset, params):
        """Test the single-label report fields."""
        train, test = dataset.split(0.25, seed=0)
        report = probe_checkpoint(params, train, test, "single", tiny_run()).report
        assert report.top1 is not None and report.f1 is not None
        assert report.recall == pytest.approx(report.top1)

    def test_finetune_copies_params(self, dataset, params):
        """Test that fine-tuning adds a head on a copy."""
        before = {name: t.data.tobytes() for name, t in params.items()}
        train, test = dataset.split(0.25, seed=0)
        result = finetune(params, train, test, "multilabel", tiny_run(), workers=1)
        assert {name: t.data.tobytes() for name, t in params.items()} == before
        assert "head.w" in result.params and "head.w" not in params
        assert len(result.losses) == 1
        assert result.report.label == "finetune"

    def test_finetune_unimodal(self, dataset, params):
        """Test S1-only fine-tuning runs and reports the condition."""
        train, test = dataset.split(0.25, seed=0)
        result = finetune(params, train, test, "single", tiny_run(), modality="s1", workers=2)
        assert result.report.modality == "s1"
        assert np.isfinite(result.losses).all()
