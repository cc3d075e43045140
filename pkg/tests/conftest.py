"""
Pytest configuration and fixtures for the Fus-MAE tests.

Everything runs at a tiny configuration (8x8 tiles, 4x4 patches, width 8)
so full forward/backward passes stay in the millisecond range.
"""
import numpy as np
import pytest

from config import settings
from models import init_params
from services.synth_data import gen_dataset, load_dataset, make_sample
from tests.utils.test_helpers import tiny_model, tiny_run


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(params=["early_concat", "xad", "xaed"])
def variant(request):
    return request.param


@pytest.fixture
def model_config():
    return tiny_model()


@pytest.fixture
def run_config():
    return tiny_run()


@pytest.fixture
def pair(run_config):
    return make_sample(0, seed=7, model=run_config.model, data=run_config.data)


@pytest.fixture
def params(model_config):
    return init_params(model_config, np.random.default_rng([0, 0]))


@pytest.fixture
def dataset_path(tmp_path, run_config):
    path = tmp_path / "data" / "train.fmds"
    gen_dataset(run_config.data.n, 7, run_config.model, run_config.data, str(path), workers=1)
    return path


@pytest.fixture
def dataset(dataset_path):
    return load_dataset(str(dataset_path))


@pytest.fixture(autouse=True)
def isolated_output_root(tmp_path, monkeypatch):
    """Default run directories and trace logs land in the test's tmp dir."""
    monkeypatch.setattr(settings, "OUTPUT_ROOT", str(tmp_path / "runs"))
    monkeypatch.setattr(settings, "LOG_DIR", str(tmp_path / "logs"))
    monkeypatch.setattr(settings, "NUM_WORKERS", 1)
