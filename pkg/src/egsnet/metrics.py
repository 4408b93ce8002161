"""Similarity scores between query and support embeddings, and nearest-way assignment.

Every variant returns an ``(N*Q) x N`` score matrix where higher means more
similar, so one softmax/argmax path serves all of them.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

METRICS = ("prototype", "cosine", "relation")
COSINE_EPS = 1e-8


def _way_onehot(support_labels: torch.Tensor, n_way: int, dtype) -> torch.Tensor:
    labels = torch.as_tensor(support_labels, dtype=torch.long)
    onehot = torch.zeros(labels.shape[0], n_way, dtype=dtype)
    onehot[torch.arange(labels.shape[0]), labels] = 1
    counts = onehot.sum(0)
    if (counts == 0).any():
        missing = torch.nonzero(counts == 0).flatten().tolist()
        raise ValueError(f"ways {missing} have no support samples")
    return onehot


def _n_way(support_labels, n_way):
    if n_way is None:
        n_way = int(torch.as_tensor(support_labels).max()) + 1
    return n_way


def way_means(support_feats: torch.Tensor, support_labels, n_way: int | None = None) -> torch.Tensor:
    """Mean support embedding of each way, ``N x d``."""
    n_way = _n_way(support_labels, n_way)
    onehot = _way_onehot(support_labels, n_way, support_feats.dtype)
    return (onehot.T @ support_feats) / onehot.sum(0)[:, None]


def prototype_scores(support_feats, support_labels, query_feats, n_way=None) -> torch.Tensor:
    """Negative squared Euclidean distance to each way prototype."""
    _check(support_feats, query_feats)
    protos = way_means(support_feats, support_labels, n_way)
    diff = query_feats[:, None, :] - protos[None, :, :]
    return -(diff**2).sum(-1)


def cosine_match_scores(support_feats, support_labels, query_feats, n_way=None) -> torch.Tensor:
    """Per-way mean cosine similarity between each query and the way's support samples."""
    _check(support_feats, query_feats)
    n_way = _n_way(support_labels, n_way)
    onehot = _way_onehot(support_labels, n_way, support_feats.dtype)
    qn = query_feats.norm(dim=1, keepdim=True)
    sn = support_feats.norm(dim=1, keepdim=True)
    cos = (query_feats @ support_feats.T) / (qn * sn.T + COSINE_EPS)
    return cos @ onehot / onehot.sum(0)


class MetricModule(nn.Module):
    variant = "abstract"

    def forward(self, support_feats, support_labels, query_feats, n_way=None) -> torch.Tensor:
        raise NotImplementedError


class PrototypeMetric(MetricModule):
    variant = "prototype"

    def forward(self, support_feats, support_labels, query_feats, n_way=None):
        return prototype_scores(support_feats, support_labels, query_feats, n_way)


class CosineMetric(MetricModule):
    variant = "cosine"

    def forward(self, support_feats, support_labels, query_feats, n_way=None):
        return cosine_match_scores(support_feats, support_labels, query_feats, n_way)


class RelationMetric(MetricModule):
    """Learned comparator on ``concat(prototype, query)`` pairs: 2d -> d -> 1."""

    variant = "relation"

    def __init__(self, dim: int, hidden: int | None = None):
        super().__init__()
        hidden = hidden or dim
        self.comparator = nn.Sequential(nn.Linear(2 * dim, hidden), nn.ReLU(), nn.Linear(hidden, 1))

    def forward(self, support_feats, support_labels, query_feats, n_way=None):
        return relation_scores(self, support_feats, support_labels, query_feats, n_way)


def relation_scores(params: RelationMetric, support_feats, support_labels, query_feats, n_way=None):
    if not isinstance(params, RelationMetric):
        raise TypeError("relation scores need initialized RelationMetric parameters")
    _check(support_feats, query_feats)
    protos = way_means(support_feats, support_labels, n_way)
    nq, n, d = query_feats.shape[0], protos.shape[0], protos.shape[1]
    pairs = torch.cat(
        [protos[None, :, :].expand(nq, n, d), query_feats[:, None, :].expand(nq, n, d)], dim=-1
    )
    return params.comparator(pairs).squeeze(-1)


def make_metric(variant: str, dim: int) -> MetricModule:
    if variant == "prototype":
        return PrototypeMetric()
    if variant == "cosine":
        return CosineMetric()
    if variant == "relation":
        return RelationMetric(dim)
    raise ValueError(f"unknown metric {variant!r}; expected one of {METRICS}")


def _check(support_feats, query_feats):
    if support_feats.ndim != 2 or query_feats.ndim != 2 or support_feats.shape[1] != query_feats.shape[1]:
        raise ValueError(
            f"feature shapes disagree: support {tuple(support_feats.shape)}, query {tuple(query_feats.shape)}"
        )


def assign_nearest(scores, way_to_domain_label=None) -> np.ndarray:
    """Argmax way per query (ties go to the lowest way index), optionally mapped to domain labels."""
    s = scores.detach().cpu().numpy() if isinstance(scores, torch.Tensor) else np.asarray(scores)
    pred = np.argmax(s, axis=1)  # first maximal index
    if way_to_domain_label is not None:
        return np.asarray(way_to_domain_label)[pred]
    return pred
