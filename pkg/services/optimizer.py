"""AdamW with decoupled weight decay and the warmup-then-cosine schedule."""
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Mapping, Union

import numpy as np

from errors import ShapeError
from schemas import OptimizerConfig, Schedule
from tensor import GradMap, Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.05
    exclude_1d_from_decay: bool = False

    @classmethod
    def create(cls, params: Mapping[str, Tensor], config: OptimizerConfig) -> "OptimizerState":
        return cls(
            m={name: np.zeros_like(p.data) for name, p in params.items()},
            v={name: np.zeros_like(p.data) for name, p in params.items()},
            t=0,
            beta1=config.beta1,
            beta2=config.beta2,
            eps=config.eps,
            weight_decay=config.weight_decay,
            exclude_1d_from_decay=config.exclude_1d_from_decay,
        )

    def decays(self, param: Tensor) -> bool:
        # biases, norm gains and learned tokens are 1-D
        return not (self.exclude_1d_from_decay and param.ndim <= 1)


Grads = Union[GradMap, Mapping[str, np.ndarray]]


def _dense(params: Mapping[str, Tensor], grads: Grads) -> Dict[str, np.ndarray]:
    if isinstance(grads, GradMap):
        return grads.dense(params)
    unknown = set(grads) - set(params)
    if unknown:
        raise ShapeError(f"gradients for unknown parameters: {sorted(unknown)[:5]}")
    out = {}
    for name in params:
        if name not in grads:
            raise ShapeError(f"no gradient for parameter {name}")
        out[name] = np.asarray(grads[name].data if isinstance(grads[name], Tensor) else grads[name])
    return out


def adamw_step(params: Mapping[str, Tensor], grads: Grads, state: OptimizerState, lr: float) -> OptimizerState:
    """
    One in-place AdamW update of every trainable parameter.

    θ ← θ(1 − lr·λ), then θ ← θ − lr·m̂ / (√v̂ + eps) with bias-corrected moments.
    """
    dense = _dense(params, grads)
    state.t += 1
    t = state.t
    b1, b2 = state.beta1, state.beta2
    bias1 = 1.0 - b1 ** t
    bias2 = 1.0 - b2 ** t

    for name, param in params.items():
        if not param.requires_grad:
            continue
        g = dense[name]
        if g.shape != param.shape:
            raise ShapeError(f"gradient for {name} has shape {g.shape}, parameter {param.shape}")
        if name not in state.m:
            state.m[name] = np.zeros_like(param.data)
            state.v[name] = np.zeros_like(param.data)
        m, v, theta = state.m[name], state.v[name], param.data
        g = g.astype(theta.dtype, copy=False)

        if state.weight_decay and state.decays(param):
            theta *= 1.0 - lr * state.weight_decay
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        theta -= lr * (m / bias1) / (np.sqrt(v / bias2) + state.eps)
    return state


def lr_at(step: int, schedule: Schedule) -> float:
    """Linear warmup from 0 to base_lr, then half-cosine decay to 0 at total_steps."""
    if step < 0:
        raise ValueError("step must be non-negative")
    warmup, total = schedule.warmup_steps, schedule.total_steps
    if step < warmup:
        return schedule.base_lr * step / warmup
    if total <= warmup:
        return schedule.base_lr
    progress = min(1.0, (step - warmup) / (total - warmup))
    return schedule.base_lr * 0.5 * (1.0 + math.cos(math.pi * progress))
