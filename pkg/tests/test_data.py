import numpy as np
import pytest
from hypothesis import given, strategies as st

from yasgd.data import gen_dataset, iteration_sizes, iterations_per_epoch, shard


def test_dataset_shape_and_determinism():
    a = gen_dataset(3, 500, 8, 4)
    b = gen_dataset(3, 500, 8, 4)
    assert a.features.shape == (500, 8) and a.features.dtype == np.float32
    assert a.labels.min() >= 0 and a.labels.max() < 4
    assert np.array_equal(a.features, b.features) and np.array_equal(a.labels, b.labels)
    ev = gen_dataset(3, 500, 8, 4, split="eval")
    assert not np.array_equal(a.features, ev.features)


def test_dataset_rejects_bad_sizes():
    with pytest.raises(ValueError):
        gen_dataset(0, 0, 4, 3)
    with pytest.raises(ValueError):
        gen_dataset(0, 10, 4, 1)


def test_small_partition_example():
    ds = gen_dataset(1, 8, 2, 2)
    shards = [shard(ds, 0, r, 2, 4) for r in range(2)]
    assert all(len(s) == 1 for s in shards)
    union = np.concatenate([s[0] for s in shards])
    assert sorted(union.tolist()) == list(range(8))


def test_world_one_gets_full_permutation():
    parts = shard(10, 2, 0, 1, 5, seed=4)
    assert sorted(np.concatenate(parts).tolist()) == list(range(10))


@given(st.integers(1, 400), st.integers(1, 8), st.integers(1, 40), st.integers(0, 5))
def test_shards_partition_selected_indices(n, world, b, epoch):
    sizes = iteration_sizes(n, world, b)
    per_rank = [shard(n, epoch, r, world, b, seed=17) for r in range(world)]
    again = [shard(n, epoch, r, world, b, seed=17) for r in range(world)]
    for a, c in zip(per_rank, again):
        assert all(np.array_equal(x, y) for x, y in zip(a, c))
    chosen = np.concatenate([ix for parts in per_rank for ix in parts]) if sizes else np.zeros(0, int)
    assert len(chosen) == len(set(chosen.tolist())) == world * sum(sizes)
    assert chosen.size == 0 or (chosen.min() >= 0 and chosen.max() < n)
    for it, size in enumerate(sizes):
        assert all(len(parts[it]) == size for parts in per_rank)


def test_underfill_rule():
    # leftover of 2 fills one per-rank batch of 2: kept, split as 1 per rank
    assert iteration_sizes(10, 2, 2) == [2, 2, 1]
    # leftover smaller than a per-rank batch is dropped
    assert iteration_sizes(10, 1, 4) == [4, 4]
    assert iteration_sizes(11, 1, 4) == [4, 4]
    assert iteration_sizes(12, 1, 5) == [5, 5]
    assert iteration_sizes(3, 4, 2) == []


def test_large_scale_update_count():
    assert iterations_per_epoch(1_280_000, 2048, 40) == 16
    assert 90 * iterations_per_epoch(1_280_000, 2048, 40) == 1440


def test_shard_rank_out_of_range():
    with pytest.raises(ValueError):
        shard(10, 0, 2, 2, 1, seed=0)
    with pytest.raises(ValueError):
        shard(10, 0, 0, 2, 1)
