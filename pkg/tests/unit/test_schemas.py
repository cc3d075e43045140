"""
Unit tests for Fus-MAE Pydantic schemas.
"""
import pytest
from pydantic import ValidationError

from schemas import MaskPlan, MetricsReport, ModelConfig, RunConfig


class TestModelConfig:
    """Test ModelConfig validation."""

    def test_desk_defaults(self):
        """Test the default patch grid."""
        config = ModelConfig()
        assert config.grid == (4, 4)
        assert config.num_masked == 12
        assert config.patch_dim(1) == 8 * 8 * 2
        assert config.patch_dim(0) == 8 * 8 * 6

    def test_patch_must_divide_tile(self):
        """Test tile / patch divisibility."""
        with pytest.raises(ValidationError):
            ModelConfig(H=30)

    def test_heads_must_divide_width(self):
        """Test width / head divisibility."""
        with pytest.raises(ValidationError):
            ModelConfig(d=64, h=3)

    def test_mask_needs_both_sets(self):
        """Test that the ratio leaves a masked and a visible patch."""
        with pytest.raises(ValidationError):
            ModelConfig(r=0.0)
        with pytest.raises(ValidationError):
            ModelConfig(H=8, W=8, P=8, r=0.75)

    def test_unknown_variant(self):
        """Test the variant literal."""
        with pytest.raises(ValidationError):
            ModelConfig(variant="late_fusion")


class TestRunConfig:
    """Test flat serialization of RunConfig."""

    def test_kv_lines(self):
        """Test section prefixes and value formatting."""
        text = RunConfig().to_kv()
        assert "model.variant=xaed\n" in text
        assert "model.xattn_shared_weights=true\n" in text
        assert "train.lr=0.00015625\n" in text
        assert text.endswith("output_dir=\n")

    def test_from_flat(self):
        """Test rebuilding nested sections from flat keys."""
        config = RunConfig.from_flat({"model.d": "32", "seed": "3", "eval.label_fraction": "0.5"})
        assert config.model.d == 32
        assert config.seed == 3
        assert config.eval.label_fraction == 0.5


class TestMaskPlan:
    """Test MaskPlan partition checks."""

    def test_unmasked(self):
        """Test the everything-visible plan."""
        plan = MaskPlan.unmasked(4)
        assert plan.visible(1) == [0, 1, 2, 3] and plan.masked(2) == []

    def test_overlap_rejected(self):
        """Test that an index cannot be visible and masked."""
        with pytest.raises(ValidationError):
            MaskPlan(visible_1=[0, 1], masked_1=[1], visible_2=[0], masked_2=[1],
                     ratio=0.5, strategy="independent")

    def test_grid_mismatch_rejected(self):
        """Test that both modalities cover the same grid."""
        with pytest.raises(ValidationError):
            MaskPlan(visible_1=[0], masked_1=[1], visible_2=[0], masked_2=[1, 2],
                     ratio=0.5, strategy="independent")


class TestMetricsReport:
    """Test MetricsReport bounds and rendering."""

    def test_out_of_range(self):
        """Test that metrics are bounded to [0, 1]."""
        with pytest.raises(ValidationError):
            MetricsReport(task="multilabel", n=4, mAP=1.2)

    def test_text_blank_fields(self):
        """Test that missing metrics render empty."""
        text = MetricsReport(task="multilabel", n=4, mAP=0.5, per_class_ap=[0.5, None]).to_text()
        assert "mAP=0.5\n" in text
        assert "top1=\n" in text
        assert "per_class_ap=0.5,\n" in text
