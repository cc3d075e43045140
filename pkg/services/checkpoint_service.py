import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Union

import numpy as np
from pydantic import ValidationError

import storage
from config import parse_key_values
from errors import CheckpointCorruptError, CheckpointShapeError, ConfigError
from models import ModelParams, param_shapes, params_from_arrays
from schemas import LossRecord, ModelConfig, RunConfig
from services.optimizer import OptimizerState

logger = logging.getLogger(__name__)


@dataclass
class Checkpoint:
    config: RunConfig
    params: ModelParams
    optimizer: OptimizerState
    step: int
    rng_state: Dict[str, Any]
    trace: List[LossRecord] = field(default_factory=list)
    version: int = storage.CHECKPOINT_VERSION

    def rng(self) -> np.random.Generator:
        """Generator positioned exactly where the run left off."""
        rng = np.random.default_rng()
        rng.bit_generator.state = self.rng_state
        return rng


def _to_record(checkpoint: Checkpoint) -> storage.CheckpointRecord:
    opt = checkpoint.optimizer
    return storage.CheckpointRecord(
        config_text=checkpoint.config.to_kv(),
        params=checkpoint.params.arrays(),
        m=opt.m,
        v=opt.v,
        t=opt.t,
        hyper=(opt.beta1, opt.beta2, opt.eps, opt.weight_decay),
        step=checkpoint.step,
        rng_state=json.dumps(checkpoint.rng_state, sort_keys=True),
        trace=[(r.step, r.lr, r.loss) for r in checkpoint.trace],
    )


def checkpoint_bytes(checkpoint: Checkpoint) -> bytes:
    return storage.encode_checkpoint(_to_record(checkpoint))


def save_checkpoint(path: Union[str, Path], checkpoint: Checkpoint) -> Path:
    return storage.write_checkpoint_file(path, _to_record(checkpoint))


def _check_table(name: str, table: Dict[str, np.ndarray], expected: Dict[str, tuple]) -> None:
    if list(table) != list(expected):
        missing = sorted(set(expected) - set(table))
        extra = sorted(set(table) - set(expected))
        raise CheckpointShapeError(f"{name} table differs from the model: missing {missing[:5]}, unexpected {extra[:5]}")
    for key, shape in expected.items():
        if table[key].shape != tuple(shape):
            raise CheckpointShapeError(f"{name} tensor {key}: checkpoint {table[key].shape}, model {tuple(shape)}")


def check_compatible(checkpoint: "Checkpoint", model: ModelConfig, source: str = "checkpoint") -> None:
    """Refuse a checkpoint whose parameter table differs from the one `model` builds."""
    stored = checkpoint.config.model
    if list(param_shapes(model).items()) != list(param_shapes(stored).items()):
        raise CheckpointShapeError(
            f"{source}: checkpoint built for variant={stored.variant} d={stored.d} "
            f"does not fit requested variant={model.variant} d={model.d}"
        )


def load_checkpoint(path: Union[str, Path], expected: Optional[ModelConfig] = None) -> Checkpoint:
    """
    Decode and validate a checkpoint. With `expected`, the stored tensor table
    must also match the parameter table of that configuration.
    """
    record = storage.read_checkpoint_file(path)
    try:
        config = RunConfig.from_flat(parse_key_values(record.config_text, source=f"{path}:config"))
    except (ValidationError, ConfigError) as exc:
        raise CheckpointCorruptError(f"{path}: unreadable config block: {exc}") from exc

    shapes = param_shapes(config.model)
    _check_table("parameter", record.params, shapes)
    _check_table("first-moment", record.m, shapes)
    _check_table("second-moment", record.v, shapes)
    try:
        rng_state = json.loads(record.rng_state)
    except json.JSONDecodeError as exc:
        raise CheckpointCorruptError(f"{path}: rng state is not valid JSON") from exc

    beta1, beta2, eps, weight_decay = record.hyper
    optimizer = OptimizerState(
        m=dict(record.m), v=dict(record.v), t=record.t,
        beta1=beta1, beta2=beta2, eps=eps, weight_decay=weight_decay,
        exclude_1d_from_decay=config.optim.exclude_1d_from_decay,
    )
    checkpoint = Checkpoint(
        config=config,
        params=params_from_arrays(config.model, record.params),
        optimizer=optimizer,
        step=record.step,
        rng_state=rng_state,
        trace=[LossRecord(step=s, lr=lr, loss=loss) for s, lr, loss in record.trace],
        version=record.version,
    )
    if expected is not None:
        check_compatible(checkpoint, expected, source=str(path))
    logger.info(f"Loaded checkpoint {path}: variant={config.model.variant}, step={record.step}")
    return checkpoint
