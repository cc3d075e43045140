"""
Downstream evaluation of a pretrained encoder: linear probing on frozen CLS
features and end-to-end fine-tuning with a linear head.
"""
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Tuple

import numpy as np

import functional as F
from config import settings
from errors import ShapeError
from models import ModelParams
from schemas import EvalConfig, MetricsReport, ModalityCondition, OptimizerConfig, RunConfig, Schedule, Task
from services.eval_metrics import PredictionSet, build_report
from services.fusmae_model import encode_cls, extract_features
from services.optimizer import OptimizerState, adamw_step, lr_at
from services.progress_tracker import ProgressTracker
from services.synth_data import Dataset, SamplePair
from tensor import Tape, Tensor, backward, no_grad

logger = logging.getLogger(__name__)

# Stream ids mixed into the evaluation seed
SUBSET_STREAM = 2
SHUFFLE_STREAM = 3


@dataclass
class ProbeResult:
    weight: np.ndarray
    bias: np.ndarray
    report: MetricsReport
    losses: List[float] = field(default_factory=list)


@dataclass
class FinetuneResult:
    params: ModelParams
    report: MetricsReport
    losses: List[float] = field(default_factory=list)


def task_targets(dataset: Dataset, task: Task) -> np.ndarray:
    return dataset.multilabels() if task == "multilabel" else dataset.single_labels()


def extract_feature_matrix(
    dataset: Dataset,
    params: ModelParams,
    modality: ModalityCondition = "s1s2",
    workers: Optional[int] = None,
) -> np.ndarray:
    """CLS features [n, d] from unmasked forwards; rows in dataset order."""
    workers = workers or settings.NUM_WORKERS

    def one(i: int) -> np.ndarray:
        return extract_features(dataset[i], params, modality=modality).data

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            rows = list(pool.map(one, range(len(dataset))))
    else:
        rows = [one(i) for i in range(len(dataset))]
    logger.info(f"Extracted {len(rows)} {modality} feature vectors of width {params.config.d}")
    return np.stack(rows)


def label_subset(n: int, fraction: float, seed: int) -> np.ndarray:
    """First ceil(fraction*n) positions of a seeded permutation (at least one), sorted."""
    keep = max(1, math.ceil(fraction * n))
    order = np.random.default_rng([seed, SUBSET_STREAM]).permutation(n)
    return np.sort(order[:keep])


def warn_absent_classes(targets: np.ndarray, task: Task, K: int, split: str = "train") -> List[int]:
    if task == "multilabel":
        counts = np.asarray(targets).sum(axis=0)
    else:
        counts = np.bincount(np.asarray(targets, dtype=np.int64), minlength=K)
    absent = [k for k in range(K) if counts[k] == 0]
    if absent:
        logger.warning(f"Classes {absent} have no examples in the {split} split; continuing")
    return absent


def _task_loss(logits: Tensor, targets: np.ndarray, task: Task, smoothing: float) -> Tensor:
    if task == "multilabel":
        return F.sigmoid_bce(logits, targets)
    return F.label_smoothed_cross_entropy(logits, targets, smoothing=smoothing)


def _epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> List[np.ndarray]:
    order = np.random.default_rng([seed, SHUFFLE_STREAM, epoch]).permutation(n)
    batch = min(batch_size, n)
    return [order[i:i + batch] for i in range(0, n, batch)]


def linear_probe(
    train_features: np.ndarray,
    train_targets: np.ndarray,
    test_features: np.ndarray,
    test_targets: np.ndarray,
    task: Task,
    eval_config: EvalConfig,
    optim_config: Optional[OptimizerConfig] = None,
    seed: int = 0,
    modality: ModalityCondition = "s1s2",
    K: Optional[int] = None,
    label: str = "probe",
) -> ProbeResult:
    """
    Train a d->K linear head with AdamW on standardized frozen features and
    report on the held-out split. Standardization statistics come from the
    (label-subsampled) training features only.
    """
    train_features = np.asarray(train_features, dtype=np.float64)
    test_features = np.asarray(test_features, dtype=np.float64)
    if train_features.ndim != 2 or test_features.shape[1:] != train_features.shape[1:]:
        raise ShapeError(f"feature matrices {train_features.shape} / {test_features.shape} disagree")
    if K is None:
        K = train_targets.shape[1] if task == "multilabel" else int(max(train_targets.max(), test_targets.max())) + 1

    keep = label_subset(len(train_features), eval_config.label_fraction, seed)
    x_train, y_train = train_features[keep], np.asarray(train_targets)[keep]
    warn_absent_classes(y_train, task, K)

    mean = x_train.mean(axis=0)
    std = x_train.std(axis=0)
    std = np.where(std > 0, std, 1.0)
    x_train = (x_train - mean) / std
    x_test = (test_features - mean) / std

    d = x_train.shape[1]
    weight = Tensor(np.zeros((d, K)), dtype="f64", requires_grad=True, name="head.w")
    bias = Tensor(np.zeros(K), dtype="f64", requires_grad=True, name="head.b")
    head = {"head.w": weight, "head.b": bias}

    optim = (optim_config or OptimizerConfig()).model_copy(
        update={"weight_decay": eval_config.weight_decay, "exclude_1d_from_decay": True}
    )
    state = OptimizerState.create(head, optim)
    if task == "multilabel":
        epochs, batch_size = eval_config.probe_epochs, eval_config.probe_batch_size
    else:
        epochs, batch_size = eval_config.single_epochs, eval_config.single_batch_size

    per_epoch = math.ceil(len(x_train) / min(batch_size, len(x_train)))
    schedule = Schedule(base_lr=eval_config.probe_lr, warmup_epochs=0.0, total_epochs=epochs, steps_per_epoch=per_epoch)

    losses: List[float] = []
    step = 0
    for epoch in range(epochs):
        epoch_losses = []
        for batch in _epoch_batches(len(x_train), batch_size, seed, epoch):
            with Tape():
                logits = F.linear(Tensor(x_train[batch]), weight, bias)
                loss = _task_loss(logits, y_train[batch], task, eval_config.label_smoothing)
                grads = backward(loss)
            adamw_step(head, grads, state, lr_at(step, schedule))
            epoch_losses.append(loss.item())
            step += 1
        losses.append(float(np.mean(epoch_losses)))
        logger.debug(f"{label} epoch {epoch + 1}/{epochs}: loss={losses[-1]:.6f}")

    scores = x_test @ weight.data + bias.data
    pred = _prediction_set(scores, np.asarray(test_targets), task)
    report = build_report(pred, task, modality=modality, label=label)
    logger.info(f"{label} ({task}, {modality}) finished: {_summary(report)}")
    return ProbeResult(weight=weight.data.copy(), bias=bias.data.copy(), report=report, losses=losses)


def _prediction_set(scores: np.ndarray, targets: np.ndarray, task: Task) -> PredictionSet:
    if task == "multilabel":
        return PredictionSet(scores=scores, true_multilabel=targets)
    return PredictionSet(scores=scores, true_single=targets)


def _summary(report: MetricsReport) -> str:
    if report.task == "multilabel":
        return f"mAP={report.mAP:.4f} on {report.n} samples"
    return f"top1={report.top1:.4f} f1={report.f1:.4f} on {report.n} samples"


def probe_checkpoint(
    params: ModelParams,
    train: Dataset,
    test: Dataset,
    task: Task,
    config: RunConfig,
    modality: ModalityCondition = "s1s2",
    workers: Optional[int] = None,
    label: str = "probe",
) -> ProbeResult:
    """Extract frozen features for both splits, then fit and score the linear probe."""
    train_features = extract_feature_matrix(train, params, modality, workers)
    test_features = extract_feature_matrix(test, params, modality, workers)
    return linear_probe(
        train_features, task_targets(train, task), test_features, task_targets(test, task),
        task=task, eval_config=config.eval, optim_config=config.optim, seed=config.seed,
        modality=modality, K=train.K, label=label,
    )


# --- fine-tuning ---

def _finetune_sample(
    pair: SamplePair, target: np.ndarray, params: ModelParams, task: Task, modality: ModalityCondition, smoothing: float
) -> Tuple[float, Dict[str, np.ndarray]]:
    d = params.config.d
    with Tape():
        cls = F.reshape(encode_cls(pair, params, modality), (1, d))
        logits = F.linear(cls, params["head.w"], params["head.b"])
        targets = target[None] if task == "multilabel" else np.asarray([target])
        loss = _task_loss(logits, targets, task, smoothing)
        grads = backward(loss)
    return loss.item(), grads.dense(params)


def finetune(
    params: ModelParams,
    train: Dataset,
    test: Dataset,
    task: Task,
    config: RunConfig,
    modality: ModalityCondition = "s1s2",
    workers: Optional[int] = None,
    label: str = "finetune",
) -> FinetuneResult:
    """
    Append a zero-initialized linear head to the CLS latent and train every
    weight. The input parameters are copied, never modified.
    """
    eval_config = config.eval
    workers = workers or settings.NUM_WORKERS
    K = train.K
    tuned = params.copy()
    tuned.add("head.w", np.zeros((params.config.d, K)))
    tuned.add("head.b", np.zeros(K))
    state = OptimizerState.create(tuned, config.optim)

    keep = label_subset(len(train), eval_config.label_fraction, config.seed)
    subset = train.subset(keep)
    targets = task_targets(subset, task)
    warn_absent_classes(targets, task, K)

    batch_size = min(eval_config.finetune_batch_size, len(subset))
    per_epoch = math.ceil(len(subset) / batch_size)
    schedule = Schedule.from_steps(
        base_lr=eval_config.finetune_lr,
        total_steps=eval_config.finetune_epochs * per_epoch,
        steps_per_epoch=per_epoch,
        warmup_fraction=config.train.warmup_fraction,
    )

    tracker = ProgressTracker(log_every=config.train.log_every)
    run_id = f"{label}[{task},{modality}]"
    tracker.start_run(run_id, schedule.total_steps)
    pool = ThreadPoolExecutor(max_workers=workers) if workers > 1 else None
    losses: List[float] = []
    step = 0
    try:
        for epoch in range(eval_config.finetune_epochs):
            epoch_losses = []
            for batch in _epoch_batches(len(subset), batch_size, config.seed, epoch):
                work = [(subset[int(i)], targets[int(i)]) for i in batch]

                def one(item):
                    return _finetune_sample(item[0], item[1], tuned, task, modality, eval_config.label_smoothing)

                results = list(pool.map(one, work)) if pool is not None else [one(item) for item in work]
                total = 0.0
                summed = {name: np.zeros_like(t.data) for name, t in tuned.items()}
                for loss, grads in results:
                    total += loss
                    for name, grad in grads.items():
                        summed[name] += grad
                for grad in summed.values():
                    grad /= len(results)

                lr = lr_at(step, schedule)
                adamw_step(tuned, summed, state, lr)
                epoch_losses.append(total / len(results))
                tracker.update_progress(run_id, step, loss=epoch_losses[-1], lr=lr)
                step += 1
            losses.append(float(np.mean(epoch_losses)))
    finally:
        if pool is not None:
            pool.shutdown()
    tracker.complete_run(run_id)

    with no_grad():
        features = extract_feature_matrix(test, tuned, modality, workers)
        scores = features.astype(np.float64) @ tuned["head.w"].data.astype(np.float64) + tuned["head.b"].data
    pred = _prediction_set(scores, task_targets(test, task), task)
    report = build_report(pred, task, modality=modality, label=label)
    logger.info(f"{label} ({task}, {modality}) finished: {_summary(report)}")
    return FinetuneResult(params=tuned, report=report, losses=losses)
