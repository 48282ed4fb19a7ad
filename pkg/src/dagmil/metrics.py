"""Accuracy, support-weighted F1 and support-weighted one-vs-rest AUC."""

import numpy as np

from .exceptions import InputError, UndefinedMetricError


def _labels(preds, labels):
    preds = np.asarray(preds).astype(np.int64).reshape(-1)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if preds.size == 0:
        raise InputError("metrics need at least one sample")
    if preds.shape != labels.shape:
        raise InputError(f"{preds.size} predictions for {labels.size} labels")
    return preds, labels


def accuracy(preds, labels):
    preds, labels = _labels(preds, labels)
    return float(np.count_nonzero(preds == labels)) / preds.size


def confusion_matrix(preds, labels, n_classes):
    preds, labels = _labels(preds, labels)
    if labels.min() < 0 or labels.max() >= n_classes or preds.min() < 0 or preds.max() >= n_classes:
        raise InputError(f"class index outside [0, {n_classes})")
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def weighted_f1(preds, labels, n_classes):
    """Per-class F1 averaged with weights equal to true-class support."""
    cm = confusion_matrix(preds, labels, n_classes)
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    den = support + predicted
    # F1 = 2 tp / (2 tp + fp + fn); zero when the class is never predicted or present
    f1 = np.divide(2 * tp, den, out=np.zeros_like(tp), where=den > 0)
    return float((f1 * support).sum() / support.sum())


def binary_auc(scores, positive):
    """Probability that a random positive outranks a random negative (ties 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    positive = np.asarray(positive, dtype=bool).reshape(-1)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs at least one positive and one negative")
    # midranks give the Mann-Whitney statistic with half credit for ties
    order = np.argsort(scores, kind="mergesort")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    boundaries = np.flatnonzero(np.diff(sorted_scores)) + 1
    starts = np.concatenate([[0], boundaries])
    ends = np.concatenate([boundaries, [scores.size]])
    mid = (starts + ends + 1) / 2.0
    ranks[order] = np.repeat(mid, ends - starts)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auc_ovr(scores, labels, n_classes):
    """One-vs-rest AUC per class, averaged with true-class support weights.

    Classes lacking positives or negatives are skipped.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape != (labels.size, n_classes):
        raise InputError(f"scores must be [{labels.size}, {n_classes}], got {list(scores.shape)}")
    if labels.size == 0:
        raise InputError("metrics need at least one sample")
    total = 0.0
    weight = 0
    for c in range(n_classes):
        positive = labels == c
        n_pos = int(positive.sum())
        if n_pos == 0 or n_pos == labels.size:
            continue
        total += n_pos * binary_auc(scores[:, c], positive)
        weight += n_pos
    if weight == 0:
        raise UndefinedMetricError("no class has both positive and negative samples")
    return total / weight
