"""
Unit tests for typed checkpoint save / load.
"""
import numpy as np
import pytest

from errors import CheckpointCorruptError, CheckpointShapeError
from services.checkpoint_service import checkpoint_bytes, check_compatible, load_checkpoint, save_checkpoint
from services.training_service import initial_checkpoint
from tests.utils.test_helpers import tiny_model, tiny_run


class TestCheckpointService:
    """Test the checkpoint service."""

    def test_save_load_is_exact(self, tmp_path):
        """Test that a reloaded checkpoint re-encodes to identical bytes."""
        original = initial_checkpoint(tiny_run())
        path = save_checkpoint(tmp_path / "ck.fmck", original)
        loaded = load_checkpoint(path)
        assert checkpoint_bytes(loaded) == checkpoint_bytes(original)
        assert loaded.config == original.config
        for name in original.params:
            np.testing.assert_array_equal(loaded.params[name].data, original.params[name].data)

    def test_rng_resumes_stream(self, tmp_path):
        """Test that the stored generator continues where it stopped."""
        checkpoint = initial_checkpoint(tiny_run())
        generator = checkpoint.rng()
        generator.random(5)
        checkpoint.rng_state = generator.bit_generator.state
        expected = generator.random(3)
        loaded = load_checkpoint(save_checkpoint(tmp_path / "ck.fmck", checkpoint))
        np.testing.assert_array_equal(loaded.rng().random(3), expected)

    def test_expected_model_mismatch(self, tmp_path):
        """Test that another variant's table is refused."""
        path = save_checkpoint(tmp_path / "ck.fmck", initial_checkpoint(tiny_run("xad")))
        with pytest.raises(CheckpointShapeError):
            load_checkpoint(path, expected=tiny_model("xaed"))

    def test_compatible_same_model(self):
        """Test that the stored configuration is accepted."""
        checkpoint = initial_checkpoint(tiny_run("xaed"))
        check_compatible(checkpoint, tiny_model("xaed", strategy="consistent"))

    def test_unreadable_config_block(self, tmp_path):
        """Test a config block that does not parse."""
        checkpoint = initial_checkpoint(tiny_run())
        raw = checkpoint_bytes(checkpoint).replace(b"model.d=8", b"model.d=x")
        path = tmp_path / "bad.fmck"
        path.write_bytes(raw)
        with pytest.raises(CheckpointCorruptError):
            load_checkpoint(path)
