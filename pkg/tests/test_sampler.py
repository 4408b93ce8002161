import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import stats

from egsnet.datasets import Domain, DomainRegistry
from egsnet.sampler import (
    BatchSampler,
    SamplingError,
    epoch_batches,
    sample_episode,
    select_domain,
)


def _domain(counts, side=2, did="d"):
    labels = np.repeat(np.arange(len(counts)), counts)
    images = np.arange(labels.size * side * side * 3, dtype=np.float32).reshape(-1, side, side, 3) / 1e6
    return Domain(did, images, labels, tuple(f"c{i}" for i in range(len(counts))))


def _registry(j):
    srcs = [_domain([3, 3], did=f"s{i}") for i in range(j)]
    return DomainRegistry(srcs, _domain([3, 3], did="t"), {0}, {1})


def test_single_domain_always_chosen():
    reg = _registry(1)
    rng = np.random.default_rng(0)
    assert {select_domain(reg, rng) for _ in range(50)} == {0}


def test_domain_selection_uniform():
    reg = _registry(3)
    rng = np.random.default_rng(7)
    draws = np.array([select_domain(reg, rng) for _ in range(30000)])
    counts = np.bincount(draws, minlength=3)
    assert stats.chisquare(counts).pvalue > 0.01
    assert np.all(np.abs(counts / 30000 - 1 / 3) < 0.01)


def test_domain_selection_deterministic():
    reg = _registry(3)
    a = [select_domain(reg, np.random.default_rng(5)) for _ in range(1)]
    r1, r2 = np.random.default_rng(5), np.random.default_rng(5)
    assert [select_domain(reg, r1) for _ in range(100)] == [select_domain(reg, r2) for _ in range(100)]
    assert a


def test_empty_registry():
    with pytest.raises(SamplingError):
        select_domain(None, np.random.default_rng(0))


def test_episode_shapes():
    d = _domain([30] * 7, side=4)
    ep = sample_episode(d, 5, 5, 16, np.random.default_rng(0))
    assert ep.support_images.shape == (25, 4, 4, 3)
    assert ep.query_images.shape == (80, 4, 4, 3)
    assert set(ep.support_labels.tolist()) == set(range(5))
    assert set(ep.query_labels.tolist()) == set(range(5))
    assert np.bincount(ep.support_labels).tolist() == [5] * 5
    assert np.bincount(ep.query_labels).tolist() == [16] * 5


def test_all_classes_used_when_n_equals_class_count():
    d = _domain([6] * 5)
    ep = sample_episode(d, 5, 1, 2, np.random.default_rng(1))
    assert sorted(ep.way_to_domain_label.tolist()) == list(range(5))


def test_exact_sample_count_split_disjointly():
    d = _domain([7, 7, 7])
    ep = sample_episode(d, 3, 2, 5, np.random.default_rng(2))
    for w, c in enumerate(ep.way_to_domain_label):
        s = set(ep.support_index[ep.support_labels == w].tolist())
        q = set(ep.query_index[ep.query_labels == w].tolist())
        assert not s & q
        assert s | q == set(np.flatnonzero(d.labels == c).tolist())


def test_small_classes_are_excluded():
    d = _domain([10, 10, 2, 10])
    for seed in range(20):
        ep = sample_episode(d, 3, 2, 3, np.random.default_rng(seed))
        assert 2 not in ep.way_to_domain_label.tolist()
    with pytest.raises(SamplingError, match="only 3 of 4"):
        sample_episode(d, 4, 2, 3, np.random.default_rng(0))


@settings(max_examples=60, deadline=None)
@given(
    counts=st.lists(st.integers(1, 12), min_size=2, max_size=8),
    n_way=st.integers(1, 4),
    k=st.integers(1, 3),
    q=st.integers(1, 4),
    seed=st.integers(0, 2**31),
)
def test_episode_invariants(counts, n_way, k, q, seed):
    d = _domain(counts)
    eligible = sum(c >= k + q for c in counts)
    if eligible < n_way:
        with pytest.raises(SamplingError):
            sample_episode(d, n_way, k, q, np.random.default_rng(seed))
        return
    ep = sample_episode(d, n_way, k, q, np.random.default_rng(seed))
    assert len(set(ep.way_to_domain_label.tolist())) == n_way
    assert np.bincount(ep.support_labels, minlength=n_way).tolist() == [k] * n_way
    assert np.bincount(ep.query_labels, minlength=n_way).tolist() == [q] * n_way
    assert not set(ep.support_index.tolist()) & set(ep.query_index.tolist())
    # remap consistency
    assert np.array_equal(ep.way_to_domain_label[ep.support_labels], d.labels[ep.support_index])
    assert np.array_equal(ep.way_to_domain_label[ep.query_labels], d.labels[ep.query_index])
    assert np.array_equal(ep.support_images, d.images[ep.support_index])


def test_batch_epoch_arithmetic():
    d = _domain([100, 100, 100])
    sizes = [b.images.shape[0] for b in epoch_batches(d, 128, 0)]
    assert sizes == [128, 128, 44]


def test_batch_epoch_is_permutation():
    d = _domain([50, 50, 50])
    seen = np.concatenate([b.index for b in epoch_batches(d, 32, 3)])
    assert sorted(seen.tolist()) == list(range(150))


def test_batch_order_deterministic():
    d = _domain([20, 20])
    a = BatchSampler(d, 8, 9)
    b = BatchSampler(d, 8, 9)
    for _ in range(12):
        assert np.array_equal(a.sample(d).index, b.sample(d).index)


def test_batch_labels_native():
    d = _domain([20, 20])
    s = BatchSampler(d, 8, 0)
    batch = s.sample(d)
    assert np.array_equal(batch.labels, d.labels[batch.index])
