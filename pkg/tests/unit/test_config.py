"""
Unit tests for run configuration resolution.
"""
import pytest

from config import Settings, parse_key_values, resolve_run_config, write_run_config
from errors import ConfigError
from schemas import RunConfig


class TestKeyValueParsing:
    """Test the flat key=value format."""

    def test_comments_and_blanks(self):
        """Test that comments and blank lines are skipped."""
        text = "# header\n\nseed = 4  # inline\ntrain.lr=0.001\n"
        assert parse_key_values(text) == {"seed": "4", "train.lr": "0.001"}

    def test_missing_equals(self):
        """Test that a line without '=' names its position."""
        with pytest.raises(ConfigError, match="<text>:2"):
            parse_key_values("seed=1\nbroken\n")


class TestResolveRunConfig:
    """Test precedence and validation."""

    def test_defaults(self):
        """Test the desk defaults."""
        config = resolve_run_config()
        assert config.model.variant == "xaed"
        assert config.train.lr == 1.5625e-4
        assert config.model.num_patches == 16

    def test_file_then_flags(self, tmp_path):
        """Test that flags win over the file and the file over defaults."""
        path = tmp_path / "run.cfg"
        path.write_text("train.steps=50\ntrain.batch_size=8\nmodel.variant=xad\n")
        config = resolve_run_config(str(path), overrides={"train.steps": "70", "seed": None})
        assert config.train.steps == 70
        assert config.train.batch_size == 8
        assert config.model.variant == "xad"
        assert config.seed == 0

    def test_base_replaces_defaults(self):
        """Test that a checkpoint's config becomes the base."""
        base = RunConfig(seed=9)
        assert resolve_run_config(base=base, overrides={"train.steps": "10"}).seed == 9

    def test_unknown_key(self, tmp_path):
        """Test that misspelled keys are refused."""
        path = tmp_path / "run.cfg"
        path.write_text("train.stpes=5\n")
        with pytest.raises(ConfigError, match="unknown config keys"):
            resolve_run_config(str(path))

    def test_invalid_value(self):
        """Test that a failing validator surfaces as a config error."""
        with pytest.raises(ConfigError):
            resolve_run_config(overrides={"model.P": "5"})

    def test_missing_file(self, tmp_path):
        """Test a config path that does not exist."""
        with pytest.raises(ConfigError):
            resolve_run_config(str(tmp_path / "absent.cfg"))

    def test_written_config_replays(self, tmp_path):
        """Test that run_config.txt resolves back to the same config."""
        config = resolve_run_config(overrides={"model.variant": "early_concat", "train.lr": "0.003", "seed": "5"})
        path = write_run_config(config, str(tmp_path / "run"))
        assert resolve_run_config(str(path)) == config


class TestSettings:
    """Test process-level settings."""

    def test_environment_override(self, monkeypatch):
        """Test FUSMAE_* environment variables."""
        monkeypatch.setenv("FUSMAE_NUM_WORKERS", "3")
        assert Settings().NUM_WORKERS == 3

    def test_invalid_workers(self, monkeypatch):
        """Test worker-count validation."""
        monkeypatch.setenv("FUSMAE_NUM_WORKERS", "0")
        with pytest.raises(ValueError):
            Settings()
