"""Evaluation metrics: Cohen's kappa, ROC AUC, sensitivity/specificity.

kappa = (p_o - p_e) / (1 - p_e) from the confusion matrix; AUC is the
Mann-Whitney statistic (probability that a positive outscores a
negative, ties counting one half), computed via tie-averaged ranks;
sensitivity/specificity use the rule ``score >= threshold -> positive``.
All functions are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import InputError


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape or y_true.ndim != 1:
        raise InputError(f"label vectors must be 1-d and equal length, "
                         f"got {y_true.shape} and {y_pred.shape}")
    if y_true.size == 0:
        raise InputError("empty label vectors")
    for name, arr in (("y_true", y_true), ("y_pred", y_pred)):
        if not np.issubdtype(arr.dtype, np.integer):
            raise InputError(f"{name} must hold integer class indices")
        if arr.min() < 0 or arr.max() >= num_classes:
            raise InputError(f"{name} has labels outside [0, {num_classes})")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def _kappa_from_confusion(cm: np.ndarray, weights: str | None) -> tuple[float, bool]:
    n = cm.sum()
    k = cm.shape[0]
    rows = cm.sum(axis=1) / n
    cols = cm.sum(axis=0) / n
    if weights is None:
        p_o = np.trace(cm) / n
        p_e = float(rows @ cols)
        if 1.0 - p_e < 1e-15:
            # Both marginals concentrated on one class: chance agreement
            # is total and kappa is undefined; report 1 for perfect
            # agreement, 0 otherwise, and flag it.
            return (1.0 if p_o >= 1.0 else 0.0), True
        return float((p_o - p_e) / (1.0 - p_e)), False
    if weights != "quadratic":
        raise InputError(f"unknown kappa weighting {weights!r}")
    idx = np.arange(k)
    w = (idx[:, None] - idx[None, :]) ** 2
    observed = float((w * cm).sum()) / n
    expected = float((w * np.outer(rows, cols)).sum())
    if expected < 1e-15:
        return (1.0 if observed < 1e-15 else 0.0), True
    return float(1.0 - observed / expected), False


def cohen_kappa(y_true, y_pred, num_classes: int, weights: str | None = None) -> float:
    """Chance-corrected agreement; ``weights='quadratic'`` for weighted kappa."""
    cm = confusion_matrix(y_true, y_pred, num_classes)
    value, _ = _kappa_from_confusion(cm, weights)
    return value


def _check_binary(y_true, scores) -> tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true)
    scores = np.asarray(scores, dtype=np.float64)
    if y_true.shape != scores.shape or y_true.ndim != 1:
        raise InputError("y_true and scores must be 1-d and equal length")
    if y_true.size == 0:
        raise InputError("empty inputs")
    if not np.issubdtype(y_true.dtype, np.integer):
        raise InputError("y_true must hold integer labels")
    if set(np.unique(y_true)) - {0, 1}:
        raise InputError("binary metrics need labels in {0, 1}")
    if not ((y_true == 0).any() and (y_true == 1).any()):
        raise InputError("both classes must be present")
    return y_true, scores


def _average_ranks(scores: np.ndarray) -> np.ndarray:
    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty(scores.size, dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(y_true, scores) -> float:
    """Mann-Whitney AUC via tie-averaged ranks (ties count one half)."""
    y_true, scores = _check_binary(y_true, scores)
    n_pos = int((y_true == 1).sum())
    n_neg = y_true.size - n_pos
    ranks = _average_ranks(scores)
    pos_rank_sum = float(ranks[y_true == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def sens_spec(y_true, scores, threshold: float) -> tuple[float, float]:
    """(sensitivity, specificity) with ``score >= threshold`` as positive."""
    y_true, scores = _check_binary(y_true, scores)
    pred = scores >= threshold
    tp = int(np.count_nonzero(pred & (y_true == 1)))
    fn = int(np.count_nonzero(~pred & (y_true == 1)))
    tn = int(np.count_nonzero(~pred & (y_true == 0)))
    fp = int(np.count_nonzero(pred & (y_true == 0)))
    return tp / (tp + fn), tn / (tn + fp)


def roc_points(y_true, scores) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(fpr, tpr, thresholds) sweeping the decision threshold downward."""
    y_true, scores = _check_binary(y_true, scores)
    order = np.argsort(-scores, kind="mergesort")
    sorted_scores = scores[order]
    sorted_true = y_true[order]
    distinct = np.flatnonzero(np.diff(sorted_scores)) if scores.size > 1 else np.array([], dtype=int)
    cut = np.concatenate([distinct, [y_true.size - 1]])
    tps = np.cumsum(sorted_true)[cut].astype(np.float64)
    fps = (cut + 1) - tps
    n_pos = float((y_true == 1).sum())
    n_neg = float(y_true.size - n_pos)
    tpr = np.concatenate([[0.0], tps / n_pos])
    fpr = np.concatenate([[0.0], fps / n_neg])
    thresholds = np.concatenate([[np.inf], sorted_scores[cut]])
    return fpr, tpr, thresholds


def youden_threshold(y_true, scores) -> float:
    """Threshold maximizing tpr - fpr (first maximum on ties)."""
    fpr, tpr, thresholds = roc_points(y_true, scores)
    best = int(np.argmax(tpr - fpr))
    return float(thresholds[best]) if np.isfinite(thresholds[best]) else float(scores.max()) + 1.0


@dataclass
class MetricsReport:
    num_classes: int
    n: int
    accuracy: float
    kappa: float
    kappa_degenerate: bool
    confusion: np.ndarray
    auc: float | None = None
    sensitivity: float | None = None
    specificity: float | None = None
    threshold: float | None = None

    def as_text(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        lines = [
            f"n={self.n}",
            f"num_classes={self.num_classes}",
            f"accuracy={fmt(self.accuracy)}",
            f"kappa={fmt(self.kappa)}",
            f"kappa_degenerate={str(self.kappa_degenerate).lower()}",
            f"auc={fmt(self.auc)}",
            f"sensitivity={fmt(self.sensitivity)}",
            f"specificity={fmt(self.specificity)}",
            f"threshold={fmt(self.threshold)}",
            "confusion=" + ";".join(",".join(str(v) for v in row) for row in self.confusion),
        ]
        return "\n".join(lines) + "\n"

    def as_csv_row(self) -> str:
        def fmt(v):
            return "" if v is None else repr(float(v))

        return ",".join([
            str(self.n), str(self.num_classes), fmt(self.accuracy), fmt(self.kappa),
            fmt(self.auc), fmt(self.sensitivity), fmt(self.specificity), fmt(self.threshold),
        ])

    @staticmethod
    def csv_header() -> str:
        return "n,num_classes,accuracy,kappa,auc,sensitivity,specificity,threshold"


def compute_report(y_true, probs: np.ndarray, num_classes: int,
                   threshold: float | None = None) -> MetricsReport:
    """Assemble the full report from per-class probabilities.

    For binary problems the positive score is ``probs[:, 1]``;
    ``threshold`` defaults to the Youden-optimal point on the same data
    (callers wanting a held-out operating point pass one explicitly).
    """
    y_true = np.asarray(y_true)
    probs = np.asarray(probs)
    if probs.ndim != 2 or probs.shape[1] != num_classes:
        raise InputError(f"probs must have shape (n, {num_classes}), got {probs.shape}")
    preds = probs.argmax(axis=1)
    cm = confusion_matrix(y_true, preds, num_classes)
    kappa, degenerate = _kappa_from_confusion(cm, None)
    accuracy = float(np.trace(cm) / cm.sum())
    report = MetricsReport(num_classes=num_classes, n=int(y_true.size),
                           accuracy=accuracy, kappa=kappa,
                           kappa_degenerate=degenerate, confusion=cm)
    if num_classes == 2:
        scores = probs[:, 1]
        report.auc = auc(y_true, scores)
        thr = youden_threshold(y_true, scores) if threshold is None else float(threshold)
        report.threshold = thr
        report.sensitivity, report.specificity = sens_spec(y_true, scores, thr)
    return report
