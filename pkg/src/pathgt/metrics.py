"""Binary classification metrics.

Ranking metrics are computed exactly: AUROC through midranks (equal, in
float arithmetic, to counting concordant pairs with half credit for
ties) and AUPRC through the step-function sum over distinct-score blocks.
Threshold selection and the fixed-grid ROC/PR curves used for
cross-validation bands live here too.
"""
from __future__ import annotations

import numpy as np

F1_STABILIZER = 1e-12
CURVE_GRID = np.linspace(0.0, 1.0, 100)


class MetricsError(ValueError):
    """Degenerate input for a metric that has no defined value."""


def _check_pair(labels, scores):
    labels = np.asarray(labels, dtype=np.int64)
    scores = np.asarray(scores, dtype=np.float64)
    if labels.shape != scores.shape or labels.ndim != 1:
        raise MetricsError(f"labels {labels.shape} and scores {scores.shape} must be equal-length vectors")
    if labels.size == 0:
        raise MetricsError("empty metric input")
    if not np.isfinite(scores).all():
        raise MetricsError("scores contain non-finite values")
    if not np.isin(labels, (0, 1)).all():
        raise MetricsError("labels must be 0 or 1")
    return labels, scores


def midranks(scores: np.ndarray) -> np.ndarray:
    """1-based ranks with ties sharing their average rank.

    Tie groups of consecutive positions i..j get rank (i+j)/2 + 1, an
    exact multiple of one half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    n = scores.size
    order = np.argsort(scores, kind="mergesort")
    s = scores[order]
    ranks = np.empty(n, dtype=np.float64)
    i = 0
    while i < n:
        j = i
        while j + 1 < n and s[j + 1] == s[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auroc(labels, scores) -> float:
    """Area under the ROC curve; ties count half.

    Returns NaN when only one class is present (no ranking is defined).
    """
    labels, scores = _check_pair(labels, scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = midranks(scores)
    pos_rank_sum = ranks[labels == 1].sum()
    return (pos_rank_sum - 0.5 * n_pos * (n_pos + 1)) / (n_pos * n_neg)


def _score_blocks(labels, scores):
    """Cumulative (tp, fp) after each distinct-score block, descending."""
    order = np.argsort(-scores, kind="mergesort")
    s = scores[order]
    y = labels[order]
    block_end = np.flatnonzero(np.concatenate((s[1:] != s[:-1], [True])))
    tp = np.cumsum(y)[block_end]
    fp = (block_end + 1) - tp
    return tp.astype(np.float64), fp.astype(np.float64), s[block_end]


def auprc(labels, scores) -> float:
    """Area under the precision-recall curve by step integration.

    Sum of (recall step) x (precision at the new recall); NaN when no
    positives exist.
    """
    labels, scores = _check_pair(labels, scores)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        return float("nan")
    tp, fp, _ = _score_blocks(labels, scores)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    prev = np.concatenate(([0.0], recall[:-1]))
    return float(((recall - prev) * precision).sum())


def confusion_at(labels, scores, tau: float) -> dict:
    """Confusion counts with the predict-positive rule score >= tau."""
    labels, scores = _check_pair(labels, scores)
    pred = scores >= tau
    pos = labels == 1
    return {
        "tp": int((pred & pos).sum()),
        "fp": int((pred & ~pos).sum()),
        "fn": int((~pred & pos).sum()),
        "tn": int((~pred & ~pos).sum()),
    }


def binary_metrics(labels, scores, tau: float) -> dict:
    """Thresholded metrics plus degeneracy flags.

    Precision is reported as 0.0 when nothing is predicted positive, with
    ``zero_predicted_positives`` set so downstream reporting can mark it.
    """
    c = confusion_at(labels, scores, tau)
    tp, fp, fn, tn = c["tp"], c["fp"], c["fn"], c["tn"]
    n = tp + fp + fn + tn
    no_pred_pos = (tp + fp) == 0
    precision = 0.0 if no_pred_pos else tp / (tp + fp)
    recall = 0.0 if (tp + fn) == 0 else tp / (tp + fn)
    specificity = 0.0 if (tn + fp) == 0 else tn / (tn + fp)
    f1 = (2.0 * tp) / (2.0 * tp + fp + fn + F1_STABILIZER)
    return {
        "accuracy": (tp + tn) / n,
        "precision": precision,
        "recall": recall,
        "specificity": specificity,
        "f1": f1,
        "zero_predicted_positives": bool(no_pred_pos),
    }


def calibrate_threshold(labels, scores) -> tuple[float, float]:
    """Threshold maximizing F1 over the distinct scores plus {0, 1}.

    Exact ties on F1 resolve to the smallest threshold. Requires both
    classes, which the fold protocol guarantees for validation sets.
    """
    labels, scores = _check_pair(labels, scores)
    if labels.min() == labels.max():
        raise MetricsError("threshold calibration needs both classes")
    candidates = np.unique(np.concatenate((scores, [0.0, 1.0])))
    best_tau, best_f1 = None, -1.0
    for tau in candidates:
        c = confusion_at(labels, scores, float(tau))
        f1 = (2.0 * c["tp"]) / (2.0 * c["tp"] + c["fp"] + c["fn"] + F1_STABILIZER)
        if f1 > best_f1:
            best_tau, best_f1 = float(tau), f1
    return best_tau, best_f1


def roc_at_grid(labels, scores, grid: np.ndarray = CURVE_GRID) -> np.ndarray:
    """True-positive rate at fixed false-positive rates, linearly
    interpolated between empirical ROC vertices."""
    labels, scores = _check_pair(labels, scores)
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricsError("ROC curve needs both classes")
    tp, fp, _ = _score_blocks(labels, scores)
    fpr = np.concatenate(([0.0], fp / n_neg))
    tpr = np.concatenate(([0.0], tp / n_pos))
    return np.interp(grid, fpr, tpr)


def pr_at_grid(labels, scores, grid: np.ndarray = CURVE_GRID) -> np.ndarray:
    """Precision at fixed recalls as a right-continuous step function:
    the precision of the first threshold whose recall reaches the grid
    point."""
    labels, scores = _check_pair(labels, scores)
    n_pos = int(labels.sum())
    if n_pos == 0 or n_pos == labels.size:
        raise MetricsError("PR curve needs both classes")
    tp, fp, _ = _score_blocks(labels, scores)
    recall = tp / n_pos
    precision = tp / (tp + fp)
    idx = np.searchsorted(recall, grid, side="left")
    idx = np.minimum(idx, recall.size - 1)
    return precision[idx]


def curve_band(per_run_values: list[np.ndarray]) -> tuple[np.ndarray, np.ndarray]:
    """Pointwise mean and sample standard deviation across runs."""
    stack = np.stack(per_run_values)
    mean = stack.mean(axis=0)
    sd = stack.std(axis=0, ddof=1) if stack.shape[0] > 1 else np.zeros_like(mean)
    return mean, sd


def mean_sd(values) -> dict:
    """Aggregate summary for one metric across runs; NaNs are dropped and
    counted separately so undefined folds stay visible."""
    arr = np.asarray(list(values), dtype=np.float64)
    ok = arr[np.isfinite(arr)]
    out = {
        "mean": float(ok.mean()) if ok.size else None,
        "sd": float(ok.std(ddof=1)) if ok.size > 1 else (0.0 if ok.size == 1 else None),
        "n": int(ok.size),
    }
    if ok.size < arr.size:
        out["undefined"] = int(arr.size - ok.size)
    return out
