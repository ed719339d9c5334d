import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from poserec.errors import CatalogExhaustedError, MiningError
from poserec.mining import (
    MiningBatch,
    complexity_bound,
    complexity_report,
    mine,
    partition_by_similarity,
    sample_hard_negatives,
    traditional_hard_negatives,
)
from oracles import cosine

CATALOG = [f"item-{j:03d}" for j in range(60)]


def random_batch(rng, b, threshold=0.5, n_neg=10, dim=6):
    positives = [set(rng.choice(CATALOG, size=rng.integers(1, 8), replace=False)) for _ in range(b)]
    return MiningBatch([f"v{j}" for j in range(b)], rng.normal(size=(b, dim)), positives, threshold, n_neg)


def test_identical_embeddings_are_all_similar():
    batch = MiningBatch(["a", "b", "c"], np.ones((3, 4)), [{"i1"}, {"i2"}, {"i3"}], threshold=0.9)
    assert all(not d for d in partition_by_similarity(batch).dissimilar)


def test_orthogonal_embeddings_are_dissimilar():
    batch = MiningBatch(["a", "b"], np.eye(2), [{"i1"}, {"i2"}], threshold=0.5)
    assert partition_by_similarity(batch).dissimilar == [{1}, {0}]


def test_partition_matches_exhaustive_pairs():
    rng = np.random.default_rng(0)
    for _ in range(20):
        batch = random_batch(rng, 8, threshold=rng.uniform(-0.5, 0.5))
        part = partition_by_similarity(batch)
        for u, v in itertools.permutations(range(8), 2):
            expected = cosine(batch.embeddings[u], batch.embeddings[v]) <= batch.threshold
            assert (v in part.dissimilar[u]) == expected
        assert part.pair_sims == 28


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 12), st.floats(-0.95, 0.95), st.integers(0, 10_000))
def test_pair_count_and_symmetry(b, p, seed):
    part = partition_by_similarity(random_batch(np.random.default_rng(seed), b, threshold=p))
    assert part.pair_sims == b * (b - 1) // 2
    for u in range(b):
        assert u not in part.dissimilar[u]
        for v in part.dissimilar[u]:
            assert u in part.dissimilar[v]


def test_all_similar_batch_falls_back_to_catalog():
    batch = MiningBatch(["a", "b"], np.ones((2, 3)), [{"item-000"}, {"item-001"}], threshold=0.5, n_neg=5)
    result = mine(batch, np.random.default_rng(0), CATALOG)
    assert result.fallback == [True, True]
    for own, negs in zip(batch.positives, result.negatives):
        assert len(negs) == 5 and not own & set(negs)


def test_full_pool_gives_exactly_n_neg():
    pos = [set(CATALOG[:2]), set(CATALOG[10:25])]
    batch = MiningBatch(["a", "b"], np.eye(2), pos, threshold=0.5, n_neg=10)
    result = mine(batch, np.random.default_rng(0), CATALOG)
    assert len(result.negatives[0]) == 10
    assert set(result.negatives[0]) <= pos[1]
    # pool for b holds only the 2 positives of a
    assert sorted(result.negatives[1]) == sorted(pos[0])


def test_shared_positive_never_becomes_negative():
    pos = [{"x", "shared"}, {"y", "shared"}]
    batch = MiningBatch(["a", "b"], np.eye(2), pos, threshold=0.5, n_neg=10)
    result = mine(batch, np.random.default_rng(0), ["x", "y", "shared"])
    assert result.negatives == [["y"], ["x"]]


def test_no_overlap_over_1000_random_batches():
    rng = np.random.default_rng(42)
    overlaps = 0
    for _ in range(1000):
        batch = random_batch(rng, int(rng.integers(2, 17)), threshold=rng.uniform(-0.9, 0.9), n_neg=int(rng.integers(1, 12)))
        result = mine(batch, rng, CATALOG)
        for own, negs in zip(batch.positives, result.negatives):
            overlaps += len(own & set(negs))
            assert 1 <= len(negs) <= batch.n_neg
            assert len(set(negs)) == len(negs)
    assert overlaps == 0


def test_same_seed_same_samples():
    batch = random_batch(np.random.default_rng(3), 10)
    a = mine(batch, np.random.default_rng(9), CATALOG)
    b = mine(batch, np.random.default_rng(9), CATALOG)
    assert a.negatives == b.negatives


def test_catalog_exhausted():
    batch = MiningBatch(["a", "b"], np.ones((2, 2)), [{"x"}, {"x"}], threshold=0.5)
    with pytest.raises(CatalogExhaustedError):
        mine(batch, np.random.default_rng(0), ["x"])


@pytest.mark.parametrize(
    "kwargs",
    [dict(positives=[{"x"}, set()]), dict(threshold=1.0), dict(video_ids=["a"])],
)
def test_invalid_batches(kwargs):
    args = dict(video_ids=["a", "b"], embeddings=np.eye(2), positives=[{"x"}, {"y"}], threshold=0.5)
    args.update(kwargs)
    with pytest.raises(MiningError):
        MiningBatch(**args)


def test_bound_arithmetic():
    assert complexity_bound(4, 3) == 32
    assert complexity_bound(2, 1) == 6


def test_two_video_batch_measures_one_pair():
    batch = MiningBatch(["a", "b"], np.eye(2), [{"x"}, {"y"}], n_neg=1)
    result = mine(batch, np.random.default_rng(0), ["x", "y"])
    report = complexity_report(result, b=2, c=1)
    assert report.pair_sims == 1 and report.measured <= report.bound == 6


def test_counters_within_bound_on_a_grid():
    rng = np.random.default_rng(5)
    for b in (2, 4, 8, 16, 32):
        for n_neg in (1, 5, 10, 20):
            batch = random_batch(rng, b, n_neg=n_neg)
            result = mine(batch, rng, CATALOG)
            assert result.item_sims == result.positives_negatives_total(batch)
            report = complexity_report(result, b)
            assert report.within_bound
            assert report.pair_sims == b * (b - 1) // 2


def test_strict_report_raises_when_bound_is_exceeded():
    batch = random_batch(np.random.default_rng(1), 8)
    result = mine(batch, np.random.default_rng(1), CATALOG)
    with pytest.raises(MiningError):
        complexity_report(result, b=8, c=0.0)
    assert not complexity_report(result, b=8, c=0.0, strict=False).within_bound


def test_traditional_miner_scores_every_batch_item():
    rng = np.random.default_rng(2)
    batch = random_batch(rng, 8)
    sims = {i: rng.uniform(-1, 1) for i in CATALOG}
    result = traditional_hard_negatives(batch, lambda v, items: [sims[i] for i in items])
    n_items = len(set().union(*batch.positives))
    assert result.item_sims == 8 * n_items
    for own, negs in zip(batch.positives, result.negatives):
        assert not own & set(negs)
        floor = min(sims[i] for i in own)
        assert all(sims[i] > floor for i in negs)
