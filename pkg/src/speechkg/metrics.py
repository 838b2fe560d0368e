"""Ranking metrics with explicit tie handling.

Average precision walks prefixes of the stable descending sort, so tied
scores make it sensitive to input order; evaluation code shuffles with a
fixed seed before calling it. AUC uses 0.5-credit pair counting, which
is order-free and equals the trapezoidal curve integral.
"""

from __future__ import annotations

import numpy as np

from .errors import MetricError


def _validated(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise MetricError(f"{scores.size} scores vs {labels.size} labels")
    if scores.size == 0:
        raise MetricError("empty inputs")
    if not np.all(np.isfinite(scores)):
        raise MetricError("non-finite score")
    if not np.all((labels == 0) | (labels == 1)):
        raise MetricError("labels must be 0 or 1")
    return scores, labels.astype(np.int64)


def average_precision(scores, labels) -> float:
    """Sum of (delta recall) * precision over prefixes of the descending
    sort, ties broken by original position."""
    scores, labels = _validated(scores, labels)
    n_pos = int(labels.sum())
    if n_pos == 0:
        raise MetricError("average precision needs at least one positive")
    order = np.argsort(-scores, kind="stable")
    hits = labels[order]
    tp = np.cumsum(hits)
    precision = tp / np.arange(1, scores.size + 1)
    # delta recall is 1/n_pos exactly at the positives
    return float(np.sum(precision[hits == 1]) / n_pos)


def roc_auc(scores, labels) -> float:
    """Mann-Whitney form: concordant pairs count 1, ties count 0.5."""
    scores, labels = _validated(scores, labels)
    n_pos = int(labels.sum())
    n_neg = scores.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUC needs both classes present")
    order = np.argsort(scores, kind="stable")
    sorted_scores = scores[order]
    ranks = np.empty(scores.size, dtype=np.float64)
    i = 0
    while i < scores.size:
        j = i
        while j + 1 < scores.size and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # tied block shares the average of ranks i+1 .. j+1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    pos_rank_sum = float(ranks[labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def macro_one_vs_rest(scores, labels, n_classes: int) -> tuple[float, float, dict]:
    """Macro-averaged AP and AUC over classes that actually occur.

    scores: (n, n_classes) per-class scores; labels: integer class ids.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if scores.ndim != 2 or scores.shape != (labels.size, n_classes):
        raise MetricError(f"scores shape {scores.shape} vs {labels.size}x{n_classes}")
    per_class: dict[int, tuple[float, float]] = {}
    aps, aucs = [], []
    for c in range(n_classes):
        binary = (labels == c).astype(np.int64)
        if binary.sum() == 0:
            continue
        ap = average_precision(scores[:, c], binary)
        auc = roc_auc(scores[:, c], binary) if binary.sum() < labels.size else float("nan")
        per_class[c] = (ap, auc)
        aps.append(ap)
        if np.isfinite(auc):
            aucs.append(auc)
    if not aps:
        raise MetricError("no class present in labels")
    macro_auc = float(np.mean(aucs)) if aucs else float("nan")
    return float(np.mean(aps)), macro_auc, per_class
