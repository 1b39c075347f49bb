"""Classification metrics: Top1 accuracy and mean average precision."""

from __future__ import annotations

import warnings

import numpy as np


def top1(scores: np.ndarray, labels: np.ndarray) -> float:
    """Fraction of samples whose highest-scoring class is the label.

    Argmax ties break toward the lowest class index.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.shape[0] != labels.shape[0]:
        raise ValueError(f"{scores.shape[0]} score rows vs {labels.shape[0]} labels")
    if scores.shape[0] == 0:
        raise ValueError("no samples")
    return float((scores.argmax(axis=1) == labels).mean())


def average_precision(scores: np.ndarray, positives: np.ndarray) -> float:
    """AP for one class: mean of precision at each positive's rank, ranking
    by score descending with stable order on ties."""
    scores = np.asarray(scores, dtype=np.float64)
    positives = np.asarray(positives, dtype=bool)
    if scores.shape != positives.shape or scores.ndim != 1:
        raise ValueError("scores and positives must be equal-length vectors")
    n_pos = int(positives.sum())
    if n_pos == 0:
        raise ValueError("average_precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = positives[order]
    cum = np.cumsum(hits)
    ranks = np.arange(1, len(scores) + 1)
    return float((cum[hits] / ranks[hits]).sum() / n_pos)


def mean_average_precision(scores: np.ndarray, labels: np.ndarray) -> float:
    """Unweighted mean of per-class AP; classes without positives are
    skipped with a warning."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"scores {scores.shape} vs {labels.shape[0]} labels")
    aps = []
    skipped = []
    for c in range(scores.shape[1]):
        positives = labels == c
        if not positives.any():
            skipped.append(c)
            continue
        aps.append(average_precision(scores[:, c], positives))
    if not aps:
        raise ValueError("no class has a positive sample")
    if skipped:
        warnings.warn(f"mAP: skipped classes without positives: {skipped}")
    return float(np.mean(aps))
