"""Training objectives for both stages and the alignment-weight schedule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F


@dataclass(frozen=True)
class LossConfig:
    lambda_emo: float = 1.0
    theta0: float = 1.0
    theta_gamma: float = 0.5
    theta_step: int = 100
    weight_decay_enabled: bool = True

    def validate(self):
        if self.lambda_emo < 0 or self.theta0 < 0:
            raise ValueError("lambda_emo and theta0 must be non-negative")
        if not 0 < self.theta_gamma <= 1:
            raise ValueError("theta_gamma must lie in (0, 1]")
        if self.theta_step < 1:
            raise ValueError("theta_step must be a positive integer")


def emotion_loss(logits: torch.Tensor, labels, present_classes) -> torch.Tensor:
    """Mean cross-entropy with the softmax restricted to ``present_classes``.

    Columns for classes absent from the current domain are masked to -inf.
    """
    labels = torch.as_tensor(labels, dtype=torch.long)
    present = torch.as_tensor(sorted(int(c) for c in present_classes), dtype=torch.long)
    c_total = logits.shape[1]
    if present.numel() == 0 or present.min() < 0 or present.max() >= c_total:
        raise ValueError(f"present classes must be a non-empty subset of 0..{c_total - 1}")
    mask = torch.zeros(c_total, dtype=torch.bool)
    mask[present] = True
    if labels.numel() and not mask[labels].all():
        bad = sorted(set(labels[~mask[labels]].tolist()))
        raise ValueError(f"labels {bad} not among the present classes")
    masked = logits.masked_fill(~mask, float("-inf"))
    return F.cross_entropy(masked, labels)


def similarity_loss(scores: torch.Tensor, query_labels) -> torch.Tensor:
    """Mean cross-entropy of softmax(scores) against the query way labels."""
    labels = torch.as_tensor(query_labels, dtype=torch.long)
    if scores.ndim != 2 or scores.shape[0] != labels.shape[0]:
        raise ValueError(f"score matrix {tuple(scores.shape)} does not match {labels.shape[0]} query labels")
    return F.cross_entropy(scores, labels)


def joint_loss(l_sim, l_emo, cfg: LossConfig):
    return l_sim + cfg.lambda_emo * l_emo


def alignment_penalty(feats_a: torch.Tensor, feats_b: torch.Tensor) -> torch.Tensor:
    """Batch mean of the squared L2 distance between paired rows."""
    if feats_a.shape != feats_b.shape:
        raise ValueError(f"alignment needs equal shapes, got {tuple(feats_a.shape)} and {tuple(feats_b.shape)}")
    return ((feats_a - feats_b) ** 2).sum(dim=1).mean()


def theta_schedule(n_e: int, cfg: LossConfig) -> float:
    """Step decay ``theta0 * gamma ** floor(n_e / step)``; constant when decay is disabled."""
    if n_e < 0:
        raise ValueError("episode counter must be non-negative")
    if not cfg.weight_decay_enabled:
        return cfg.theta0
    return cfg.theta0 * cfg.theta_gamma ** (n_e // cfg.theta_step)


def emotion_alternate_loss(l_emo, penalty, theta):
    """Emotion-branch objective while the similarity branch is frozen.

    The caller passes a penalty built from detached similarity features.
    """
    return l_emo + theta * penalty


def similarity_alternate_loss(l_sim, penalty, theta):
    return l_sim + theta * penalty


def uniform_ce(num_classes: int) -> float:
    return math.log(num_classes)
