from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from . import nn_core
from .data_synth import ClassSplit, DomainDataset
from .exceptions import ConfigError, EmptyPopulationError

logger = logging.getLogger('rpf.eval')

NUM_THRESHOLDS = 8


@dataclass
class Prediction:
    """
    Thresholded predictions for a batch. predicted_label is the open sentinel (C) wherever
    max_confidence < threshold
    """

    predicted_label: np.ndarray
    max_confidence: np.ndarray
    probs: np.ndarray
    threshold: float


@dataclass
class ThresholdRow:
    threshold: float
    known_acc: float
    open_acc: float
    h_score: float
    flagged: bool = False


@dataclass
class SweepTable:
    rows: list[ThresholdRow]
    flags: list[str] = field(default_factory=list)

    @property
    def best(self) -> ThresholdRow:
        """Row with the highest H-score, lowest threshold on ties"""

        return max(self.rows, key=lambda row: (row.h_score, -row.threshold))

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame([row.__dict__ for row in self.rows])


@dataclass
class EvalReport:
    acc_known: float
    sweep: SweepTable
    best_h_score: float
    best_threshold: float
    per_class_accuracy: dict[int, float]
    confusion: list[list[int]]
    num_known_samples: int
    num_open_samples: int

    def to_dict(self) -> dict:
        return {
            'acc_known': self.acc_known,
            'best_h_score': self.best_h_score,
            'best_threshold': self.best_threshold,
            'sweep': [row.__dict__ for row in self.sweep.rows],
            'flags': self.sweep.flags,
            'per_class_accuracy': {str(c): acc for c, acc in self.per_class_accuracy.items()},
            'confusion_at_best_threshold': self.confusion,
            'num_known_samples': self.num_known_samples,
            'num_open_samples': self.num_open_samples
        }


def predict_proba(f: nn_core.MlpParams, h: nn_core.HeadParams, x: np.ndarray) -> np.ndarray:
    return nn_core.softmax(nn_core.head_forward(h, nn_core.mlp_forward(f, np.atleast_2d(x))))


def predict_with_threshold(state: nn_core.ModelState, x: np.ndarray, threshold: float) -> Prediction:
    """
    Classifies as argmax of softmax(h(f(x))) when the max confidence reaches the threshold, otherwise as open.
    Ties in the argmax go to the lowest class index

    Parameters
    ----------
    state (nn_core.ModelState): The trained model
    x (np.ndarray): Inputs of shape (batch, D)
    threshold (float): Confidence threshold in (0, 1)

    Returns
    ----------
    Prediction: Labels, confidences and full softmax rows
    """

    if not 0 < threshold < 1:
        raise ConfigError(f'Threshold must lie in (0, 1), got {threshold}')

    probs = predict_proba(state.f, state.h, x)
    labels = probs.argmax(axis=1)
    max_confidence = probs.max(axis=1)
    labels = np.where(max_confidence < threshold, state.h.num_classes, labels)
    return Prediction(predicted_label=labels, max_confidence=max_confidence, probs=probs, threshold=threshold)


def closed_set_accuracy(f: nn_core.MlpParams, h: nn_core.HeadParams, dataset: DomainDataset) -> float:
    """Fraction of samples whose argmax equals the label, no rejection"""

    if not len(dataset):
        raise EmptyPopulationError(f'No samples in {dataset.domain_id} to measure accuracy on')
    return float((predict_proba(f, h, dataset.x).argmax(axis=1) == dataset.y).mean())


def accuracy_known(state: nn_core.ModelState, known_samples: DomainDataset) -> float:
    """
    Acc: closed-set accuracy on the known-class target samples (open classes are not given)

    Parameters
    ----------
    state (nn_core.ModelState): The trained model
    known_samples (DomainDataset): Target samples restricted to known classes

    Returns
    ----------
    float: Fraction classified correctly
    """

    return closed_set_accuracy(state.f, state.h, known_samples)


def h_score(known_acc: float, open_acc: float) -> float:
    """Harmonic mean of known and open accuracy, 0 when both are 0"""

    if known_acc + open_acc == 0:
        return 0.0
    return 2 * known_acc * open_acc / (known_acc + open_acc)


def sweep_thresholds(num_thresholds: int = NUM_THRESHOLDS) -> list[float]:
    """Equal-interval grid k / (n + 1), k = 1..n, open endpoints excluded"""

    return [k / (num_thresholds + 1) for k in range(1, num_thresholds + 1)]


def threshold_sweep(state: nn_core.ModelState, target: DomainDataset, class_split: ClassSplit,
                    num_thresholds: int = NUM_THRESHOLDS) -> SweepTable:
    """
    Known accuracy (with rejection active), open accuracy and H-score at each threshold of the grid

    Parameters
    ----------
    state (nn_core.ModelState): The trained model
    target (DomainDataset): Target samples, known and open
    class_split (ClassSplit): Tells known labels from open ones

    Returns
    ----------
    SweepTable: One row per threshold. A missing population is flagged and scores H = 0
    """

    if not len(target):
        raise EmptyPopulationError('Threshold sweep needs a non-empty target')

    probs = predict_proba(state.f, state.h, target.x)
    argmax = probs.argmax(axis=1)
    max_confidence = probs.max(axis=1)
    is_known = np.isin(target.y, class_split.known_classes)

    flags = []
    if not is_known.any():
        flags.append('target has no known-class samples, known accuracy undefined')
    if is_known.all():
        flags.append('target has no open-class samples, open accuracy undefined')

    rows = []
    for threshold in sweep_thresholds(num_thresholds):
        accepted = max_confidence >= threshold
        known_acc = float((accepted & (argmax == target.y))[is_known].mean()) if is_known.any() else float('nan')
        open_acc = float((~accepted)[~is_known].mean()) if (~is_known).any() else float('nan')
        flagged = bool(flags)
        rows.append(ThresholdRow(threshold, known_acc, open_acc, 0.0 if flagged else h_score(known_acc, open_acc),
                                 flagged))

    for flag in flags:
        logger.warning(flag)
    return SweepTable(rows, flags)


def evaluate(state: nn_core.ModelState, target: DomainDataset, class_split: ClassSplit) -> EvalReport:
    """
    Acc, the threshold sweep, best H-score, per-class accuracy and the confusion counts at the best threshold

    Returns
    ----------
    EvalReport: The evaluation report
    """

    known_mask = np.isin(target.y, class_split.known_classes)
    known = target.where(known_mask)
    acc_known = accuracy_known(state, known) if len(known) else float('nan')

    sweep = threshold_sweep(state, target, class_split)
    best = sweep.best

    probs = predict_proba(state.f, state.h, target.x)
    argmax = probs.argmax(axis=1)
    per_class_accuracy = {
        int(c): float((argmax[target.y == c] == c).mean())
        for c in class_split.known_classes if (target.y == c).any()
    }

    sentinel = class_split.open_sentinel
    predicted = np.where(probs.max(axis=1) < best.threshold, sentinel, argmax)
    truth = np.where(known_mask, target.y, sentinel)
    confusion = np.zeros((sentinel + 1, sentinel + 1), dtype=np.int64)
    np.add.at(confusion, (truth, predicted), 1)

    logger.info(f'Acc {acc_known:.4f} | best H-score {best.h_score:.4f} at threshold {best.threshold:.3f}')

    return EvalReport(
        acc_known=acc_known,
        sweep=sweep,
        best_h_score=best.h_score,
        best_threshold=best.threshold,
        per_class_accuracy=per_class_accuracy,
        confusion=confusion.tolist(),
        num_known_samples=int(known_mask.sum()),
        num_open_samples=int((~known_mask).sum())
    )
