"""Episode and mini-batch sampling.

Each sampler owns its own ``numpy.random.Generator`` so the emotion-branch
batch stream and the similarity-branch episode stream never perturb each
other. Samplers are picklable; their state is checkpointed with the run.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .datasets import Domain, DomainRegistry


class SamplingError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Episode:
    domain_id: str
    support_images: np.ndarray
    support_labels: np.ndarray
    query_images: np.ndarray
    query_labels: np.ndarray
    way_to_domain_label: np.ndarray
    support_index: np.ndarray
    query_index: np.ndarray

    @property
    def n_way(self) -> int:
        return int(self.way_to_domain_label.shape[0])


@dataclass(frozen=True, eq=False)
class Batch:
    domain_id: str
    images: np.ndarray
    labels: np.ndarray
    index: np.ndarray


def select_domain(registry: DomainRegistry, rng: np.random.Generator) -> int:
    """Index of a uniformly drawn source domain."""
    n = len(registry.source_domains) if registry is not None else 0
    if n == 0:
        raise SamplingError("no source domains to select from")
    return int(rng.integers(n))


def episode_indices(labels: np.ndarray, n_way: int, k_shot: int, n_query: int, rng: np.random.Generator):
    """Draw ``(ways, support_idx, query_idx)`` for one episode over a label vector.

    ``support_idx``/``query_idx`` are ``n_way x k_shot`` / ``n_way x n_query``
    row-major by way. Classes with fewer than ``k_shot + n_query`` samples are
    not eligible as ways.
    """
    if n_way < 1 or k_shot < 1 or n_query < 1:
        raise SamplingError("n_way, k_shot and n_query must be positive")
    num_classes = int(labels.max()) + 1 if labels.size else 0
    counts = np.bincount(labels, minlength=num_classes)
    eligible = np.flatnonzero(counts >= k_shot + n_query)
    if eligible.size < n_way:
        raise SamplingError(
            f"{n_way}-way {k_shot}-shot with {n_query} queries needs {n_way} classes with "
            f">= {k_shot + n_query} samples; only {eligible.size} of {num_classes} qualify"
        )
    ways = rng.choice(eligible, size=n_way, replace=False)
    support = np.empty((n_way, k_shot), dtype=np.int64)
    query = np.empty((n_way, n_query), dtype=np.int64)
    for w, c in enumerate(ways):
        pool = np.flatnonzero(labels == c)
        pick = rng.choice(pool, size=k_shot + n_query, replace=False)
        support[w] = pick[:k_shot]
        query[w] = pick[k_shot:]
    return ways.astype(np.int64), support, query


def sample_episode(domain: Domain, n_way: int, k_shot: int, n_query: int, rng: np.random.Generator) -> Episode:
    ways, support, query = episode_indices(domain.labels, n_way, k_shot, n_query, rng)
    s_idx, q_idx = support.reshape(-1), query.reshape(-1)
    return Episode(
        domain_id=domain.id,
        support_images=domain.images[s_idx],
        support_labels=np.repeat(np.arange(n_way), k_shot),
        query_images=domain.images[q_idx],
        query_labels=np.repeat(np.arange(n_way), n_query),
        way_to_domain_label=ways,
        support_index=s_idx,
        query_index=q_idx,
    )


class EpisodeSampler:
    """Seeded stream of N-way K-shot episodes."""

    def __init__(self, n_way: int, k_shot: int, n_query: int, seed):
        self.n_way, self.k_shot, self.n_query = n_way, k_shot, n_query
        self.rng = np.random.default_rng(seed)

    def sample(self, domain: Domain) -> Episode:
        return sample_episode(domain, self.n_way, self.k_shot, self.n_query, self.rng)


class BatchSampler:
    """Epoch-shuffled mini-batches over one domain.

    Each pass draws a fresh permutation; the final batch of a pass may be
    smaller than ``batch_size``.
    """

    def __init__(self, domain: Domain, batch_size: int, seed):
        if len(domain) == 0:
            raise SamplingError(f"domain {domain.id!r} is empty")
        if batch_size < 1:
            raise SamplingError("batch_size must be positive")
        self.domain_id = domain.id
        self.size = len(domain)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self.order = np.empty(0, dtype=np.int64)
        self.cursor = 0
        self.epoch = 0

    def next_indices(self) -> np.ndarray:
        if self.cursor >= self.order.size:
            self.order = self.rng.permutation(self.size)
            self.cursor = 0
            self.epoch += 1
        idx = self.order[self.cursor : self.cursor + self.batch_size]
        self.cursor += idx.size
        return idx

    def sample(self, domain: Domain) -> Batch:
        if domain.id != self.domain_id or len(domain) != self.size:
            raise SamplingError(f"sampler bound to {self.domain_id!r}, got {domain.id!r}")
        idx = self.next_indices()
        return Batch(domain.id, domain.images[idx], domain.labels[idx], idx)


def sample_batch(domain: Domain, batch_size: int, rng: np.random.Generator) -> Batch:
    """One uniform draw without replacement (a single-batch epoch)."""
    if len(domain) == 0:
        raise SamplingError(f"domain {domain.id!r} is empty")
    idx = rng.permutation(len(domain))[:batch_size]
    return Batch(domain.id, domain.images[idx], domain.labels[idx], idx)


def epoch_batches(domain: Domain, batch_size: int, seed) -> list[Batch]:
    """All batches of one epoch under a fresh sampler."""
    sampler = BatchSampler(domain, batch_size, seed)
    out = [sampler.sample(domain)]
    while sampler.cursor < sampler.size:
        out.append(sampler.sample(domain))
    return out


def make_batch_samplers(domains: Sequence[Domain], batch_size: int, seed: int) -> list[BatchSampler]:
    return [BatchSampler(d, batch_size, [seed, 11, j]) for j, d in enumerate(domains)]
