"""Scoring: label-set identification, set-size accuracy, binary query
accuracy, and rank-statistic AUC."""

from __future__ import annotations

import math

import numpy as np
from scipy.stats import rankdata

from .labelsets import LabelSet


def _rate(hits: int, n: int) -> float:
    return hits / n


def binomial_sigma(rate: float, n: int) -> float:
    """Standard error of an empirical rate under the binomial model."""
    if n <= 0:
        raise ValueError("need at least one trial")
    return math.sqrt(max(rate * (1.0 - rate), 0.0) / n)


def labelset_report(predictions: list[list[LabelSet]], truths: list[LabelSet], top: int = 3) -> dict:
    """Exact and top-k identification rates, overall and per true set size,
    plus set-size accuracy (|rank-1 prediction| == |truth|).

    Each prediction must be a ranked list of at least ``top`` label sets.
    Every rate comes with its binomial sigma under key "<name>_sigma".
    """
    if not predictions or len(predictions) != len(truths):
        raise ValueError("need one non-empty ranked prediction per truth")
    for ranked in predictions:
        if len(ranked) < top:
            raise ValueError(f"each prediction must rank at least {top} label sets")
    sizes = sorted({len(t) for t in truths})
    exact_hits = {s: 0 for s in sizes}
    top_hits = {s: 0 for s in sizes}
    counts = {s: 0 for s in sizes}
    size_hits = 0
    for ranked, truth in zip(predictions, truths):
        s = len(truth)
        counts[s] += 1
        if ranked[0].mask == truth.mask:
            exact_hits[s] += 1
        if any(r.mask == truth.mask for r in ranked[:top]):
            top_hits[s] += 1
        if len(ranked[0]) == s:
            size_hits += 1
    n = len(truths)
    report = {
        "n": n,
        "exact": {"all": _rate(sum(exact_hits.values()), n)},
        f"top{top}": {"all": _rate(sum(top_hits.values()), n)},
        "size_accuracy": _rate(size_hits, n),
    }
    for s in sizes:
        report["exact"][str(s)] = _rate(exact_hits[s], counts[s])
        report[f"top{top}"][str(s)] = _rate(top_hits[s], counts[s])
    report["counts"] = {str(s): counts[s] for s in sizes}
    report["exact_sigma"] = binomial_sigma(report["exact"]["all"], n)
    report[f"top{top}_sigma"] = binomial_sigma(report[f"top{top}"]["all"], n)
    report["size_accuracy_sigma"] = binomial_sigma(report["size_accuracy"], n)
    return report


def binary_accuracy(scores, labels, threshold: float = 0.5) -> float:
    """Mean of ((score >= threshold) == label); ties at the threshold count positive."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels must align, got {scores.shape} vs {labels.shape}")
    if scores.size == 0:
        raise ValueError("need at least one score")
    return float(np.mean((scores >= threshold) == (labels > 0.5)))


def auc_rank(scores, labels) -> float:
    """P(score+ > score-) + 0.5 P(score+ = score-) via the rank-sum statistic.

    Invariant under strictly monotone transforms of the scores; requires
    both classes present.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    if scores.shape != labels.shape:
        raise ValueError(f"scores and labels must align, got {scores.shape} vs {labels.shape}")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs at least one positive and one negative")
    ranks = rankdata(scores, method="average")
    u = ranks[labels].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def calibrate_threshold(scores, labels) -> float:
    """Decision threshold maximizing accuracy on a validation split.

    Candidates are midpoints between adjacent distinct scores plus the
    extremes; ties resolve toward the smallest threshold.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels) > 0.5
    uniq = np.unique(scores)
    candidates = np.concatenate([[uniq[0] - 1.0], (uniq[:-1] + uniq[1:]) / 2.0, [uniq[-1] + 1.0]])
    accs = [np.mean((scores >= c) == labels) for c in candidates]
    return float(candidates[int(np.argmax(accs))])
