"""
Ranking and classification metrics for downstream evaluation.

All rankings sort by descending score with ties broken by ascending index,
so every metric is deterministic and invariant under strictly monotone
transforms of the scores.
"""
import logging
from dataclasses import dataclass
from typing import List, Optional, Tuple

import numpy as np
from sklearn.metrics import confusion_matrix, precision_recall_fscore_support

from errors import MetricError, ShapeError
from schemas import MetricsReport, ModalityCondition, Task

logger = logging.getLogger(__name__)


@dataclass
class PredictionSet:
    scores: np.ndarray  # [n, K]
    true_multilabel: Optional[np.ndarray] = None  # [n, K] bits
    true_single: Optional[np.ndarray] = None  # [n] class ids

    def __post_init__(self):
        self.scores = np.asarray(self.scores, dtype=np.float64)
        if self.scores.ndim != 2:
            raise ShapeError(f"scores must be [n, K], got {self.scores.shape}")
        if np.isnan(self.scores).any():
            raise MetricError("scores contain NaN")
        n, k = self.scores.shape
        if self.true_multilabel is not None:
            self.true_multilabel = np.asarray(self.true_multilabel).astype(np.int64)
            if self.true_multilabel.shape != (n, k):
                raise ShapeError(f"multilabel targets {self.true_multilabel.shape} vs scores {(n, k)}")
        if self.true_single is not None:
            self.true_single = np.asarray(self.true_single).astype(np.int64).reshape(-1)
            if self.true_single.shape != (n,):
                raise ShapeError(f"single-label targets {self.true_single.shape} vs {n} samples")
            if self.true_single.min() < 0 or self.true_single.max() >= k:
                raise ShapeError(f"single-label targets outside [0, {k})")

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def K(self) -> int:
        return self.scores.shape[1]


def _descending(scores: np.ndarray, axis: int = -1) -> np.ndarray:
    return np.argsort(-scores, axis=axis, kind="stable")


def average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean of precision@rank over the ranks holding a positive."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).astype(bool).reshape(-1)
    if scores.shape != labels.shape:
        raise ShapeError(f"{scores.size} scores vs {labels.size} labels")
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision is undefined without positives")

    hits = labels[_descending(scores)]
    ranks = np.arange(1, hits.size + 1)
    precision_at = np.cumsum(hits) / ranks
    return float(precision_at[hits].sum() / n_pos)


def mean_average_precision(pred: PredictionSet) -> Tuple[float, List[Optional[float]]]:
    """Unweighted mean AP over classes with positives; other classes report None."""
    if pred.true_multilabel is None:
        raise MetricError("mean_average_precision needs multilabel targets")
    per_class: List[Optional[float]] = []
    for k in range(pred.K):
        column = pred.true_multilabel[:, k]
        if column.sum() == 0:
            per_class.append(None)
            continue
        per_class.append(average_precision(pred.scores[:, k], column))

    excluded = [k for k, ap in enumerate(per_class) if ap is None]
    if excluded:
        logger.warning(f"Classes {excluded} have no positives and are excluded from mAP")
    scored = [ap for ap in per_class if ap is not None]
    if not scored:
        raise MetricError("no class has a positive label")
    return float(np.mean(scored)), per_class


def topk_accuracy(pred: PredictionSet, k: int) -> float:
    if pred.true_single is None:
        raise MetricError("topk_accuracy needs single-label targets")
    if not 1 <= k <= pred.K:
        raise MetricError(f"k={k} outside [1, {pred.K}]")
    top = _descending(pred.scores, axis=1)[:, :k]
    return float(np.mean(np.any(top == pred.true_single[:, None], axis=1)))


def predicted_classes(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximum, i.e. ties go to the lowest index
    return np.argmax(scores, axis=1)


def weighted_prf(pred: PredictionSet) -> Tuple[float, float, float]:
    """Support-weighted precision, recall and F1; classes never predicted take precision 0."""
    if pred.true_single is None:
        raise MetricError("weighted_prf needs single-label targets")
    precision, recall, f1, _ = precision_recall_fscore_support(
        pred.true_single,
        predicted_classes(pred.scores),
        labels=list(range(pred.K)),
        average="weighted",
        zero_division=0,
    )
    return float(precision), float(recall), float(f1)


def confusion(pred: PredictionSet) -> np.ndarray:
    return confusion_matrix(pred.true_single, predicted_classes(pred.scores), labels=list(range(pred.K)))


def build_report(pred: PredictionSet, task: Task, modality: ModalityCondition = "s1s2", label: str = "") -> MetricsReport:
    if task == "multilabel":
        mAP, per_class = mean_average_precision(pred)
        return MetricsReport(task=task, modality=modality, label=label, n=pred.n, mAP=mAP, per_class_ap=per_class)

    precision, recall, f1 = weighted_prf(pred)
    report = MetricsReport(
        task=task, modality=modality, label=label, n=pred.n,
        top1=topk_accuracy(pred, 1),
        top3=topk_accuracy(pred, 3) if pred.K >= 3 else None,
        precision=precision, recall=recall, f1=f1,
    )
    logger.debug(f"Confusion matrix ({label or task}):\n{confusion(pred)}")
    return report
