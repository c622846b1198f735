import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from replaylab.errors import ConfigError, ShapeError
from replaylab.memory import (
    POLICIES,
    HybridMemory,
    KMeansMemory,
    MeanOfFeaturesMemory,
    ReservoirMemory,
    RingMemory,
    make_memory,
    slots_from_json,
)
from replaylab.nn import Batch


def items(values, label=0, task=1):
    """One batch whose inputs are the scalars in ``values`` (handy for identifying slots)."""
    values = np.asarray(values, dtype=float)
    return Batch.for_task(values.reshape(-1, 1), np.full(len(values), label), task)


def ids(memory):
    return [float(s.input[0]) for s in memory.slots]


def write(memory, task, batch, rng, features=None):
    if memory.needs_features and features is None:
        features = batch.inputs
    memory.update(task, batch, rng, features=features)


# ---------------------------------------------------------------- reservoir


def test_reservoir_under_capacity_keeps_arrival_order(rng):
    m = ReservoirMemory(5)
    m.update(1, items([1, 2, 3, 4, 5]), rng)
    assert ids(m) == [1, 2, 3, 4, 5]
    assert m.n_seen == 5


def test_reservoir_retention_frequency_per_item():
    hits = np.zeros(100)
    for trial in range(10_000):
        rng = np.random.default_rng(trial)
        m = ReservoirMemory(10)
        for start in range(0, 100, 10):
            m.update(1, items(range(start, start + 10)), rng)
        hits[[int(v) for v in ids(m)]] += 1
    freq = hits / 10_000
    assert np.all(np.abs(freq - 0.10) <= 0.01)


def test_reservoir_single_slot_second_item_half_the_time():
    kept = 0
    for trial in range(10_000):
        m = ReservoirMemory(1)
        m.update(1, items([1, 2]), np.random.default_rng(trial))
        kept += ids(m) == [2.0]
    assert abs(kept / 10_000 - 0.5) <= 0.02


def test_reservoir_counter_spans_batches(rng):
    m = ReservoirMemory(3)
    m.update(1, items([1, 2]), rng)
    m.update(1, items([3, 4]), rng)
    assert m.n_seen == 4
    assert len(m) == 3


# ---------------------------------------------------------------- ring


def test_ring_quota_one_keeps_latest():
    m = RingMemory(10, 10)
    m.update(1, items([1, 2, 3], label=4))
    assert ids(m) == [3.0]
    assert m.quota == 1


def test_ring_quota_two_keeps_last_two_in_order():
    m = RingMemory(4, 2)
    m.update(1, items([1, 2, 3, 4], label=0))
    assert ids(m) == [3.0, 4.0]


def test_ring_quota_is_per_task_and_class():
    m = RingMemory(4, 4)
    m.update(1, items([1, 2], label=0))
    m.update(2, items([3, 4], label=0))
    assert m.class_counts() == {(1, 0): 1, (2, 0): 1}


def test_ring_rejects_impossible_quota():
    with pytest.raises(ConfigError):
        RingMemory(3, 10)


# ---------------------------------------------------------------- k-means


def test_kmeans_single_centroid_running_mean():
    m = KMeansMemory(1, 1)
    m.update(1, items([2.0]), features=[[2.0]])
    np.testing.assert_allclose(m.centroids(1, 0), [[2.0]])
    m.update(1, items([4.0]), features=[[4.0]])
    np.testing.assert_allclose(m.centroids(1, 0), [[3.0]])


def test_kmeans_first_item_seeds_centroid_with_zero_distance():
    m = KMeansMemory(2, 1)
    m.update(1, items([5.0]), features=[[5.0]])
    (slot,) = m.slots
    assert slot.aux_distance == 0.0
    np.testing.assert_allclose(m.centroids(1, 0), [[5.0]])


def test_kmeans_far_item_does_not_replace_slot():
    m = KMeansMemory(1, 1)
    m.update(1, items([1.0]), features=[[0.0]])
    m.update(1, items([2.0]), features=[[0.2]])
    # centroid moves to 0.1; the new item is 0.1 away, farther than the stored 0
    assert ids(m) == [1.0]
    m.update(1, items([3.0]), features=[[10.0]])
    assert ids(m) == [1.0]


def test_kmeans_closer_item_replaces_slot():
    m = KMeansMemory(1, 1)
    m.update(1, items([1.0]), features=[[0.0]])
    m.slots[0].aux_distance = 5.0  # pretend the stored example went stale
    m.update(1, items([2.0]), features=[[1.0]])
    assert ids(m) == [2.0]
    assert m.slots[0].aux_distance == pytest.approx(0.5)


def test_kmeans_duplicate_features_do_not_seed_two_centroids():
    m = KMeansMemory(2, 1)
    m.update(1, items([1.0, 2.0]), features=[[0.0], [0.0]])
    assert m.centroids(1, 0).shape == (1, 1)
    assert len(m) == 1


def test_kmeans_needs_features():
    m = KMeansMemory(2, 1)
    with pytest.raises(ShapeError):
        m.update(1, items([1.0]))
    with pytest.raises(ShapeError):
        m.update(1, items([1.0, 2.0]), features=[[0.0]])


# ---------------------------------------------------------------- mean of features


def test_mof_ema_hand_example():
    m = MeanOfFeaturesMemory(1, 1, alpha=0.5)
    m.means[(1, 0)] = np.array([0.0])  # start from f = 0
    m.update(1, items([1.0]), features=[[4.0]])
    np.testing.assert_allclose(m.means[(1, 0)], [2.0])
    m.update(1, items([2.0]), features=[[2.0]])
    np.testing.assert_allclose(m.means[(1, 0)], [2.0])


def test_mof_first_feature_seeds_mean():
    m = MeanOfFeaturesMemory(2, 1)
    m.update(1, items([1.0]), features=[[3.0, -1.0]])
    np.testing.assert_allclose(m.means[(1, 0)], [3.0, -1.0])
    assert m.slots[0].aux_distance == 0.0


def test_mof_heap_keeps_the_closer_item():
    m = MeanOfFeaturesMemory(1, 1)
    m.heaps[(1, 0)] = []
    m.means[(1, 0)] = np.array([0.0])
    m.alpha = 0.999999  # keep the mean (almost) still
    m.update(1, items([1.0]), features=[[5.0]])
    m.update(1, items([2.0]), features=[[1.0]])
    assert ids(m) == [2.0]
    assert m.max_distance(1, 0) == pytest.approx(1.0, abs=1e-4)


def test_mof_farther_item_leaves_heap_unchanged():
    m = MeanOfFeaturesMemory(1, 1, alpha=0.999999)
    m.update(1, items([1.0]), features=[[0.0]])
    m.update(1, items([2.0]), features=[[0.5]])
    before = ids(m)
    m.update(1, items([3.0]), features=[[9.0]])
    assert ids(m) == before


# ---------------------------------------------------------------- hybrid


def test_hybrid_single_class_fills_like_reservoir(rng):
    m = HybridMemory(2)
    m.update(1, items([1, 2, 3, 4], label=0, task=1), rng)
    assert len(m) == 2
    assert all(s.task_id == 1 for s in m.slots)
    assert m.mode == "reservoir"


def scripted_switch_memory():
    """A seed for which task 2 pushes task-1 class 0 down to a single slot."""
    for seed in range(1000):
        rng = np.random.default_rng(seed)
        m = HybridMemory(4)
        m.update(1, items([1, 2], label=0, task=1), rng)
        m.update(1, items([3, 4], label=1, task=1), rng)
        for k in range(5):
            m.update(2, items([10 + k], label=0, task=2), rng)
            if m.mode == "ring":
                return m, rng
    raise AssertionError("no seed triggered the switch")


def test_hybrid_switch_fires_once_and_sticks():
    m, rng = scripted_switch_memory()
    assert m.switch_task == 2
    at = m.switched_at
    counts = m.class_counts()
    assert min(c for (t, _), c in counts.items() if t == 1) <= 1
    for k in range(20):
        m.update(3, items([100 + k], label=k % 2, task=3), rng)
        assert m.mode == "ring"
    assert m.switched_at == at and m.switch_task == 2


def test_hybrid_eviction_moves_crowded_class_toward_quota(rng):
    m = HybridMemory(3)
    m.update(1, items([1, 2, 3], label=0, task=1), rng)
    m.mode = "ring"  # crowded class with 3 slots, quota about to drop to 1
    m.update(2, items([10], label=0, task=2), rng)
    m.update(2, items([11], label=1, task=2), rng)
    counts = m.class_counts()
    assert counts[(1, 0)] == 1 and m.quota == 1
    # further writes never push a class below min(count, quota)
    m.update(2, items([12, 13], label=1, task=2), rng)
    assert m.class_counts() == {(1, 0): 1, (2, 0): 1, (2, 1): 1}
    assert ids(m)[-1] == 13.0


def test_ring_full_variant_uses_whole_memory(rng):
    m = make_memory("ring-full", 6, 100)
    m.update(1, items([1, 2, 3, 4, 5, 6, 7], label=0), rng)
    assert len(m) == 6
    assert ids(m) == [2, 3, 4, 5, 6, 7]
    m.update(1, items([8, 9], label=1), rng)
    # each new class-1 item evicts the oldest slot of the crowded class
    assert m.class_counts() == {(1, 0): 4, (1, 1): 2}
    assert ids(m) == [4, 5, 6, 7, 8, 9]


def test_hybrid_switch_trims_to_quota_randomly():
    m, _ = scripted_switch_memory()
    assert all(c <= max(1, m.mem_sz // len(m.observed)) for c in m.class_counts().values())


# ---------------------------------------------------------------- sampling


def test_sample_from_empty_memory_is_empty(rng):
    assert len(ReservoirMemory(3).sample(10, rng)) == 0


def test_sample_single_slot_repeats(rng):
    m = ReservoirMemory(3)
    m.update(1, items([7.0]), rng)
    b = m.sample(10, rng)
    assert len(b) == 10 and np.all(b.inputs == 7.0) and np.all(b.task_ids == 1)


def test_sample_inclusion_frequency_is_uniform():
    m = ReservoirMemory(100)
    m.update(1, items(range(100)), np.random.default_rng(0))
    hits = np.zeros(100)
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        b = m.sample(10, rng)
        assert len(set(b.inputs[:, 0])) == 10  # without replacement
        hits[b.inputs[:, 0].astype(int)] += 1
    assert np.all(np.abs(hits / 10_000 - 0.10) <= 0.01)


def test_sample_rejects_bad_size(rng):
    with pytest.raises(ValueError):
        ReservoirMemory(3).sample(0, rng)


# ---------------------------------------------------------------- properties


stream_strategy = st.lists(
    st.tuples(st.integers(1, 4), st.lists(st.integers(0, 3), min_size=1, max_size=10)),
    min_size=1,
    max_size=30,
)


def feed(policy, mem_sz, classes, stream, seed):
    m = make_memory(policy, mem_sz, classes)
    rng = np.random.default_rng(seed)
    history = []
    value = 0
    for task, labels in sorted(stream, key=lambda p: p[0]):
        vals = np.arange(value, value + len(labels), dtype=float)
        value += len(labels)
        batch = Batch.for_task(vals.reshape(-1, 1), labels, task)
        feats = np.column_stack([np.sin(vals), np.cos(vals)])
        m.update(task, batch, rng, features=feats if m.needs_features else None)
        history.extend((task, y, v) for y, v in zip(labels, vals))
        assert len(m) <= mem_sz
    return m, history


@settings(max_examples=60, deadline=None)
@given(st.sampled_from(POLICIES), st.integers(16, 40), stream_strategy, st.integers(0, 1000))
def test_capacity_and_balance(policy, mem_sz, stream, seed):
    classes = 16  # 4 tasks x 4 labels
    m, history = feed(policy, mem_sz, classes, stream, seed)
    if policy in ("ring", "kmeans", "mof"):
        quota = mem_sz // classes
        seen: dict = {}
        for t, y, _ in history:
            seen[(t, y)] = seen.get((t, y), 0) + 1
        counts = m.class_counts()
        for key, n in seen.items():
            if policy == "kmeans":
                assert counts.get(key, 0) <= quota
            else:
                assert counts.get(key, 0) == min(n, quota)


@settings(max_examples=60, deadline=None)
@given(st.integers(16, 40), stream_strategy)
def test_ring_recency(mem_sz, stream):
    m, history = feed("ring", mem_sz, 16, stream, 0)
    quota = mem_sz // 16
    for key, fifo in m.fifos.items():
        arrivals = [v for t, y, v in history if (t, y) == key]
        assert [float(s.input[0]) for s in fifo] == arrivals[-quota:]


@settings(max_examples=30, deadline=None)
@given(st.sampled_from(POLICIES), stream_strategy, st.integers(0, 1000))
def test_policies_are_deterministic(policy, stream, seed):
    a, _ = feed(policy, 20, 16, stream, seed)
    b, _ = feed(policy, 20, 16, stream, seed)
    assert a.to_json() == b.to_json()


def test_policies_coincide_under_capacity(rng):
    batch = items([1, 2, 3], label=0)
    contents = set()
    for policy in POLICIES:
        m = make_memory(policy, 10, 1)
        write(m, 1, batch, np.random.default_rng(0))
        contents.add(tuple(ids(m)))
    assert contents == {(1.0, 2.0, 3.0)}


def test_json_round_trip(rng):
    m = ReservoirMemory(4)
    m.update(3, items([0.25, 0.5], label=2), rng)
    back = slots_from_json(m.to_json())
    assert [(s.label, s.task_id, float(s.input[0])) for s in back] == [(2, 3, 0.25), (2, 3, 0.5)]


def test_make_memory_validation():
    with pytest.raises(ConfigError):
        make_memory("lru", 10, 10)
    with pytest.raises(ConfigError):
        ReservoirMemory(0)
    with pytest.raises(ConfigError):
        MeanOfFeaturesMemory(10, 10, alpha=1.0)
    assert math.isinf(MeanOfFeaturesMemory(10, 10).max_distance(1, 0))
