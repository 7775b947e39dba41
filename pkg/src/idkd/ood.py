"""Maximum-softmax-probability OoD scoring and threshold calibration."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import InvalidInputError
from .model import MlpModel, predict, softmax_with_temperature


@dataclass(frozen=True)
class CalibrationResult:
    """Chosen threshold and the exact ROC sweep it was picked from.

    ``curve`` rows are ``(threshold, tpr, fpr)`` with strictly increasing
    thresholds.
    """

    t_opt: float
    tpr_at_t: float
    fpr_at_t: float
    curve: tuple[tuple[float, float, float], ...]

    @property
    def youden_j(self) -> float:
        return self.tpr_at_t - self.fpr_at_t

    def to_csv(self, path) -> None:
        with Path(path).open("w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["threshold", "tpr", "fpr"])
            for row in self.curve:
                w.writerow([repr(v) for v in row])


def msp_scores(model: MlpModel, features) -> np.ndarray:
    """Max softmax probability per row at temperature 1."""
    feats = getattr(features, "features", features)
    probs = softmax_with_temperature(predict(model, np.asarray(feats)), 1.0)
    return probs.max(axis=1).astype(np.float64)


def candidate_thresholds(scores: np.ndarray) -> np.ndarray:
    values = np.unique(scores)
    if values.size == 1:
        return values
    return values[:-1] + (values[1:] - values[:-1]) / 2


def calibrate_threshold(id_scores, ood_scores) -> CalibrationResult:
    """Pick the threshold maximizing ``TPR - FPR`` with ID as the positive class.

    A sample is flagged in-distribution when its score is strictly above the
    threshold. Candidates are the midpoints between adjacent distinct values of
    the pooled scores; ties go to the largest threshold.
    """
    id_scores = np.sort(np.asarray(id_scores, dtype=np.float64))
    ood_scores = np.sort(np.asarray(ood_scores, dtype=np.float64))
    if id_scores.size == 0 or ood_scores.size == 0:
        raise InvalidInputError("calibration needs non-empty ID and OoD score sets")
    thresholds = candidate_thresholds(np.concatenate([id_scores, ood_scores]))
    n_id, n_ood = id_scores.size, ood_scores.size
    tp = n_id - np.searchsorted(id_scores, thresholds, side="right")
    fp = n_ood - np.searchsorted(ood_scores, thresholds, side="right")
    # integer form of (tp/n_id - fp/n_ood) avoids float ties
    j = tp * n_ood - fp * n_id
    best = int(np.flatnonzero(j == j.max())[-1])
    tpr = tp / n_id
    fpr = fp / n_ood
    curve = tuple((float(t), float(a), float(b)) for t, a, b in zip(thresholds, tpr, fpr))
    return CalibrationResult(float(thresholds[best]), float(tpr[best]), float(fpr[best]), curve)


def select_id_subset(records, t_opt: float) -> list:
    """Records whose confidence is strictly above ``t_opt``, order preserved."""
    return [r for r in records if r.confidence > t_opt]
