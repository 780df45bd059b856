"""Loss functions for the three training modes.

All losses accept either single vectors/scalars or batches (leading
dimensions broadcast) and reduce to a scalar mean over the batch.
"""

from __future__ import annotations

import torch

BCE_CLAMP = 1e-7


def triplet_margin_loss(anchor: torch.Tensor, pos: torch.Tensor, neg: torch.Tensor, margin: float = 0.1) -> torch.Tensor:
    """Hinge on unsquared Euclidean distances: max(0, d(a,p) - d(a,n) + margin).

    Zero exactly when d(a,p) + margin <= d(a,n); the flat region carries
    zero subgradient.
    """
    if margin <= 0.0:
        raise ValueError("margin must be positive")
    d_pos = torch.linalg.vector_norm(anchor - pos, dim=-1)
    d_neg = torch.linalg.vector_norm(anchor - neg, dim=-1)
    return torch.relu(d_pos - d_neg + margin).mean()


def bce_query_loss(p: torch.Tensor, label: torch.Tensor) -> torch.Tensor:
    """Binary cross-entropy on probabilities; inputs at exactly 0/1 are clamped."""
    p = torch.clamp(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    label = label.to(p.dtype)
    return -(label * torch.log(p) + (1.0 - label) * torch.log1p(-p)).mean()


def weighted_multilabel_bce(probs: torch.Tensor, labels: torch.Tensor) -> torch.Tensor:
    """Per-image class-balanced BCE summed over classes.

    With n_pos positive and n_neg negative classes in an image, positives
    weigh n_neg/(n_pos+n_neg) and negatives n_pos/(n_pos+n_neg), so the two
    sides contribute equally regardless of imbalance.  An all-positive or
    all-negative image falls back to uniform weights (0.5 each).  Batched
    input returns the mean of per-image sums.
    """
    if probs.shape != labels.shape:
        raise ValueError(f"probs and labels must align, got {tuple(probs.shape)} vs {tuple(labels.shape)}")
    squeeze = probs.dim() == 1
    if squeeze:
        probs, labels = probs.unsqueeze(0), labels.unsqueeze(0)
    labels = labels.to(probs.dtype)
    n_classes = probs.shape[-1]
    n_pos = labels.sum(dim=-1, keepdim=True)
    n_neg = n_classes - n_pos
    w_pos = torch.where((n_pos > 0) & (n_neg > 0), n_neg / n_classes, torch.full_like(n_pos, 0.5))
    w_neg = torch.where((n_pos > 0) & (n_neg > 0), n_pos / n_classes, torch.full_like(n_pos, 0.5))
    weights = labels * w_pos + (1.0 - labels) * w_neg
    p = torch.clamp(probs, BCE_CLAMP, 1.0 - BCE_CLAMP)
    bce = -(labels * torch.log(p) + (1.0 - labels) * torch.log1p(-p))
    per_image = (weights * bce).sum(dim=-1)
    return per_image.mean()
