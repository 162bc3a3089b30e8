"""Downstream evaluation metrics: ROC AUC, Dice, IoU.

AUC uses the mid-rank formulation, which equals the pairwise definition
(ties count one half) exactly.  Dice and IoU treat two empty masks as a
perfect match (1.0) so lesion-free images do not poison segmentation means.
"""

from __future__ import annotations

import numpy as np


def metric_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Probability that a random positive scores above a random negative,
    with ties worth 1/2.  Requires both classes present."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels must align, got {scores.shape} vs {labels.shape}")
    uniq = np.unique(labels)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"labels must be binary 0/1, got values {uniq}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC is undefined with a single class")

    order = np.argsort(scores, kind="mergesort")
    ranks = np.empty_like(scores)
    sorted_scores = scores[order]
    # mid-ranks: tied scores share the mean of their 1-based rank positions
    i = 0
    pos = np.arange(1, len(scores) + 1, dtype=np.float64)
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = pos[i:j + 1].mean()
        i = j + 1
    rank_sum = ranks[labels == 1].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def metric_auc_multilabel(scores: np.ndarray, labels: np.ndarray) -> float:
    """Mean of per-column AUCs for [n, k] score/label matrices."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 2 or scores.shape != labels.shape:
        raise ValueError("multilabel AUC needs matching [n, k] matrices")
    return float(np.mean([metric_auc(scores[:, j], labels[:, j]) for j in range(scores.shape[1])]))


def _binarize(mask: np.ndarray) -> np.ndarray:
    return (np.asarray(mask) > 0.5).astype(np.float64)


def metric_dice(pred: np.ndarray, target: np.ndarray) -> float:
    """2|A∩B| / (|A|+|B|); 1.0 when both masks are empty."""
    a, b = _binarize(pred), _binarize(target)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = float((a * b).sum())
    denom = float(a.sum() + b.sum())
    if denom == 0.0:
        return 1.0
    return 2.0 * inter / denom


def metric_iou(pred: np.ndarray, target: np.ndarray) -> float:
    """|A∩B| / |A∪B|; 1.0 when both masks are empty."""
    a, b = _binarize(pred), _binarize(target)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = float((a * b).sum())
    union = float(a.sum() + b.sum()) - inter
    if union == 0.0:
        return 1.0
    return inter / union
