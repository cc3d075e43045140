"""
Masked-reconstruction pretraining loop.

Each step draws a mini-batch from a seeded per-epoch permutation, samples
one mask plan per sample from the run's mask generator (main thread, in
batch order), runs forward/backward per sample on the worker pool and
averages losses and gradients in batch index order before the AdamW step.
The mask generator state, optimizer moments and loss trace all go into the
checkpoint, so a resumed run continues the uninterrupted one exactly.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from config import settings
from errors import ConfigError, NumericError
from models import ModelParams, init_params
from schemas import LossRecord, MaskPlan, RunConfig, Schedule
from services.checkpoint_service import Checkpoint, save_checkpoint
from services.fusmae_model import forward_pretrain, pretrain_mask
from services.optimizer import OptimizerState, adamw_step, lr_at
from services.progress_tracker import ProgressTracker
from services.synth_data import Dataset, SamplePair
from tensor import Tape, backward

logger = logging.getLogger(__name__)

# Stream ids mixed into the run seed; 2-4 are taken by evaluation and reconstruction
INIT_STREAM = 0
MASK_STREAM = 1
EPOCH_STREAM = 5


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    trace: List[LossRecord]
    checkpoint_path: Optional[Path] = None


def steps_per_epoch(n: int, batch_size: int) -> int:
    """Full batches per epoch; the tail of each permutation is dropped."""
    return max(1, n // min(batch_size, n))


def build_schedule(config: RunConfig, n: int) -> Schedule:
    return Schedule.from_steps(
        base_lr=config.train.lr,
        total_steps=config.train.steps,
        steps_per_epoch=steps_per_epoch(n, config.train.batch_size),
        warmup_fraction=config.train.warmup_fraction,
    )


def epoch_order(seed: int, epoch: int, n: int) -> np.ndarray:
    return np.random.default_rng([seed, EPOCH_STREAM, epoch]).permutation(n)


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    batch = min(batch_size, n)
    epoch, position = divmod(step, steps_per_epoch(n, batch_size))
    return epoch_order(seed, epoch, n)[position * batch:(position + 1) * batch]


def window_means(trace: List[LossRecord], window: int) -> Tuple[float, float]:
    """Mean loss over the first and over the last `window` steps of a trace."""
    losses = np.array([r.loss for r in trace], dtype=np.float64)
    return float(losses[:window].mean()), float(losses[-window:].mean())


def sample_gradient(pair: SamplePair, plan: MaskPlan, params: ModelParams) -> Tuple[float, Dict[str, np.ndarray]]:
    """Loss and dense parameter gradients for one sample under a fixed mask plan."""
    with Tape():
        out = forward_pretrain(pair, params, plan=plan)
        grads = backward(out.loss)
    return out.loss.item(), grads.dense(params)


def batch_gradient(
    pairs: List[SamplePair],
    plans: List[MaskPlan],
    params: ModelParams,
    pool: Optional[ThreadPoolExecutor] = None,
) -> Tuple[float, Dict[str, np.ndarray]]:
    """Mean loss and gradients over the batch, reduced in index order."""
    if pool is None:
        results = [sample_gradient(p, m, params) for p, m in zip(pairs, plans)]
    else:
        results = list(pool.map(lambda item: sample_gradient(item[0], item[1], params), zip(pairs, plans)))

    total = 0.0
    summed: Dict[str, np.ndarray] = {name: np.zeros_like(t.data) for name, t in params.items()}
    for loss, grads in results:
        total += loss
        for name, grad in grads.items():
            summed[name] += grad
    scale = 1.0 / len(results)
    for grad in summed.values():
        grad *= scale
    return total * scale, summed


def intermediate_path(checkpoint_path: str, step: int) -> Path:
    """`run/checkpoint.fmck` -> `run/checkpoint-step000100.fmck`."""
    path = Path(checkpoint_path)
    return path.with_name(f"{path.stem}-step{step:06d}{path.suffix}")


def initial_checkpoint(config: RunConfig) -> Checkpoint:
    params = init_params(config.model, np.random.default_rng([config.seed, INIT_STREAM]))
    return Checkpoint(
        config=config,
        params=params,
        optimizer=OptimizerState.create(params, config.optim),
        step=0,
        rng_state=np.random.default_rng([config.seed, MASK_STREAM]).bit_generator.state,
        trace=[],
    )


def _check_resume(config: RunConfig, resume: Checkpoint) -> None:
    if resume.config.model != config.model:
        raise ConfigError("resume checkpoint was trained with a different model configuration")
    if resume.config.seed != config.seed or resume.config.train.batch_size != config.train.batch_size:
        raise ConfigError("resume needs the checkpoint's seed and batch size")
    if resume.step > config.train.steps:
        raise ConfigError(f"checkpoint is at step {resume.step}, beyond train.steps={config.train.steps}")


def pretrain_loop(
    dataset: Dataset,
    config: RunConfig,
    checkpoint_path: Optional[str] = None,
    resume: Optional[Checkpoint] = None,
    workers: Optional[int] = None,
    on_checkpoint: Optional[Callable[[Checkpoint], None]] = None,
) -> TrainResult:
    """
    Run config.train.steps optimizer steps (continuing from `resume` if given),
    writing an intermediate checkpoint every `checkpoint_every` steps and the
    final one to `checkpoint_path`.
    """
    dataset.check_compatible(config.model)
    n = len(dataset)
    batch_size = min(config.train.batch_size, n)
    schedule = build_schedule(config, n)
    workers = workers or settings.NUM_WORKERS

    if resume is not None:
        _check_resume(config, resume)
        state = Checkpoint(
            config=config, params=resume.params, optimizer=resume.optimizer,
            step=resume.step, rng_state=resume.rng_state, trace=list(resume.trace),
        )
    else:
        state = initial_checkpoint(config)
    params, optimizer = state.params, state.optimizer
    mask_rng = state.rng()
    trace = state.trace

    logger.info(
        f"Pretraining {config.model.variant}/{config.model.strategy}: n={n}, batch={batch_size}, "
        f"steps={config.train.steps} ({schedule.steps_per_epoch}/epoch, warmup {schedule.warmup_steps}), "
        f"base_lr={config.train.lr}, workers={workers}"
    )
    tracker = ProgressTracker(log_every=config.train.log_every)
    run_id = f"pretrain[{config.model.variant}]"
    tracker.start_run(run_id, config.train.steps, start_step=state.step)

    def snapshot(step: int) -> Checkpoint:
        return Checkpoint(
            config=config, params=params, optimizer=optimizer, step=step,
            rng_state=mask_rng.bit_generator.state, trace=list(trace),
        )

    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    try:
        for step in range(state.step, config.train.steps):
            indices = batch_indices(config.seed, step, n, config.train.batch_size)
            pairs = [dataset[int(i)] for i in indices]
            plans = [pretrain_mask(config.model, mask_rng) for _ in pairs]
            try:
                loss, grads = batch_gradient(pairs, plans, params, pool)
            except NumericError as exc:
                raise NumericError(
                    f"step {step}: {exc} (batch samples {indices[:8].tolist()}...)", op=exc.op
                ) from exc
            if not np.isfinite(loss):
                raise NumericError(f"step {step}: non-finite loss {loss} (batch samples {indices[:8].tolist()}...)")

            lr = lr_at(step, schedule)
            adamw_step(params, grads, optimizer, lr)
            trace.append(LossRecord(step=step, lr=lr, loss=loss))
            tracker.update_progress(run_id, step, loss=loss, lr=lr)

            every = config.train.checkpoint_every
            if checkpoint_path and every and (step + 1) % every == 0 and step + 1 < config.train.steps:
                checkpoint = snapshot(step + 1)
                save_checkpoint(intermediate_path(checkpoint_path, step + 1), checkpoint)
                if on_checkpoint:
                    on_checkpoint(checkpoint)
    except Exception:
        tracker.complete_run(run_id, success=False)
        raise
    finally:
        if pool is not None:
            pool.shutdown()

    final = snapshot(config.train.steps)
    written = save_checkpoint(checkpoint_path, final) if checkpoint_path else None
    tracker.complete_run(run_id)
    if trace:
        window = config.train.smoothing_window
        first, last = window_means(trace, window)
        logger.info(f"Mean loss over first / last {window} steps: {first:.6f} / {last:.6f}")
    return TrainResult(checkpoint=final, trace=trace, checkpoint_path=written)
