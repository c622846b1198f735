"""Tiny episodic memories and their write policies.

Every memory exposes the same surface:

* ``update(task_id, batch, rng, features=None)`` writes a current-task
  mini-batch.  Policies with ``needs_features = True`` (k-means, mean of
  features) expect ``features`` to hold the feature map of each batch row.
* ``sample(k, rng)`` draws a replay mini-batch.
* ``slots`` lists the stored :class:`MemorySlot` objects in write order.
"""
from __future__ import annotations

import heapq
import itertools
import json
import math
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ShapeError
from .nn import Batch

POLICIES = ("reservoir", "ring", "kmeans", "mof", "hybrid", "ring-full")


@dataclass
class MemorySlot:
    input: np.ndarray
    label: int
    task_id: int
    aux_distance: float = math.inf
    seq: int = 0  # global write counter, keeps slot order stable across policies

    def to_dict(self) -> dict:
        return {"input": [float(v) for v in self.input], "label": int(self.label), "task_id": int(self.task_id)}


def slots_to_json(slots) -> str:
    return json.dumps([s.to_dict() for s in slots])


def slots_from_json(text: str) -> list[MemorySlot]:
    return [
        MemorySlot(np.asarray(d["input"], dtype=np.float64), int(d["label"]), int(d["task_id"]), seq=i)
        for i, d in enumerate(json.loads(text))
    ]


class EpisodicMemory:
    """Shared bookkeeping; subclasses implement ``update``."""

    name = "base"
    needs_features = False

    def __init__(self, mem_sz: int):
        if mem_sz < 1:
            raise ConfigError(f"memory size must be positive, got {mem_sz}")
        self.mem_sz = int(mem_sz)
        self.n_seen = 0
        self._seq = itertools.count()

    def _slot(self, x, y, t, d=math.inf) -> MemorySlot:
        return MemorySlot(np.array(x, dtype=np.float64), int(y), int(t), float(d), next(self._seq))

    @property
    def slots(self) -> list[MemorySlot]:
        raise NotImplementedError

    def __len__(self) -> int:
        return len(self.slots)

    def update(self, task_id: int, batch: Batch, rng: np.random.Generator, features=None) -> "EpisodicMemory":
        raise NotImplementedError

    def class_counts(self) -> dict[tuple[int, int], int]:
        counts: dict[tuple[int, int], int] = {}
        for s in self.slots:
            counts[(s.task_id, s.label)] = counts.get((s.task_id, s.label), 0) + 1
        return counts

    def sample(self, k: int, rng: np.random.Generator) -> Batch:
        """Uniform replay batch of ``k`` examples.

        Without replacement when the memory holds at least ``k`` slots, with
        replacement below that, and an empty batch when nothing is stored.
        """
        if k < 1:
            raise ValueError(f"replay batch size must be positive, got {k}")
        slots = self.slots
        if not slots:
            return Batch(np.zeros((0, 0)), [], [])
        if len(slots) >= k:
            idx = rng.choice(len(slots), size=k, replace=False)
        else:
            idx = rng.integers(0, len(slots), size=k)
        chosen = [slots[i] for i in idx]
        return Batch(
            np.stack([s.input for s in chosen]),
            [s.label for s in chosen],
            [s.task_id for s in chosen],
        )

    def to_json(self) -> str:
        return slots_to_json(self.slots)


class ReservoirMemory(EpisodicMemory):
    """Uniform reservoir over the whole stream.

    Once full, the j-th item of a batch arriving after ``n`` stream items
    draws ``i`` uniformly from ``{0, ..., n + j}`` and lands in slot ``i``
    when ``i < mem_sz``, so every item seen so far is retained with
    probability ``mem_sz / (items seen)``.
    """

    name = "reservoir"

    def __init__(self, mem_sz: int):
        super().__init__(mem_sz)
        self._slots: list[MemorySlot] = []

    @property
    def slots(self) -> list[MemorySlot]:
        return self._slots

    def update(self, task_id, batch, rng, features=None, n=None):
        n = self.n_seen if n is None else n
        for j in range(len(batch)):
            slot = self._slot(batch.inputs[j], batch.labels[j], task_id)
            if len(self._slots) < self.mem_sz:
                self._slots.append(slot)
            else:
                i = int(rng.integers(0, n + j + 1))
                if i < self.mem_sz:
                    self._slots[i] = slot
        self.n_seen = n + len(batch)
        return self


class RingMemory(EpisodicMemory):
    """One FIFO of ``mem_sz // num_classes`` entries per (task, class)."""

    name = "ring"

    def __init__(self, mem_sz: int, num_classes: int):
        super().__init__(mem_sz)
        if num_classes < 1:
            raise ConfigError("ring buffer needs the total class count")
        self.quota = mem_sz // num_classes
        if self.quota < 1:
            raise ConfigError(f"mem_sz={mem_sz} leaves no room per class for {num_classes} classes")
        self.fifos: dict[tuple[int, int], deque] = {}

    @property
    def slots(self) -> list[MemorySlot]:
        return sorted((s for q in self.fifos.values() for s in q), key=lambda s: s.seq)

    def update(self, task_id, batch, rng=None, features=None):
        for x, y in zip(batch.inputs, batch.labels):
            key = (int(task_id), int(y))
            fifo = self.fifos.setdefault(key, deque(maxlen=self.quota))
            fifo.append(self._slot(x, y, task_id))
        self.n_seen += len(batch)
        return self


def _check_features(features, batch: Batch) -> np.ndarray:
    if features is None:
        raise ShapeError("this memory policy needs the feature map of every batch item")
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[0] != len(batch):
        raise ShapeError(f"{features.shape[0]} feature rows for a batch of {len(batch)}")
    return features


class KMeansMemory(EpisodicMemory):
    """Per (task, class): ``k`` sequential k-means centroids in feature space.

    Slot ``j`` keeps the example that was closest to centroid ``j`` at the
    time it was written.  The first ``k`` distinct feature vectors of a
    class seed the centroids (count 1, stored distance 0).
    """

    name = "kmeans"
    needs_features = True

    def __init__(self, mem_sz: int, num_classes: int):
        super().__init__(mem_sz)
        self.k = mem_sz // num_classes
        if self.k < 1:
            raise ConfigError(f"mem_sz={mem_sz} leaves no centroid per class for {num_classes} classes")
        self.feature_dim: int | None = None
        # (task, class) -> [centroids (list of arrays), counts, slots]
        self.groups: dict[tuple[int, int], tuple[list, list, list]] = {}

    @property
    def slots(self) -> list[MemorySlot]:
        return sorted((s for g in self.groups.values() for s in g[2]), key=lambda s: s.seq)

    def centroids(self, task_id: int, label: int) -> np.ndarray:
        return np.array(self.groups[(task_id, label)][0])

    def update(self, task_id, batch, rng=None, features=None):
        features = _check_features(features, batch)
        if self.feature_dim is None:
            self.feature_dim = features.shape[1]
        elif features.shape[1] != self.feature_dim:
            raise ShapeError(f"feature width {features.shape[1]} != {self.feature_dim}")
        for x, y, phi in zip(batch.inputs, batch.labels, features):
            centroids, counts, slots = self.groups.setdefault((int(task_id), int(y)), ([], [], []))
            if len(centroids) < self.k and not any(np.array_equal(phi, c) for c in centroids):
                centroids.append(phi.copy())
                counts.append(1)
                slots.append(self._slot(x, y, task_id, 0.0))
                continue
            dists = [np.linalg.norm(phi - c) for c in centroids]
            j = int(np.argmin(dists))
            counts[j] += 1
            centroids[j] = centroids[j] + (phi - centroids[j]) / counts[j]
            d = float(np.linalg.norm(phi - centroids[j]))
            if d < slots[j].aux_distance:
                slots[j] = self._slot(x, y, task_id, d)
        self.n_seen += len(batch)
        return self


class MeanOfFeaturesMemory(EpisodicMemory):
    """Per (task, class): examples closest to a running feature mean.

    The mean is an exponential moving average with decay ``alpha`` seeded
    by the first feature vector of the class.  Each class keeps a bounded
    max-heap on distance; a new example displaces the current maximum only
    when it is strictly closer.
    """

    name = "mof"
    needs_features = True

    def __init__(self, mem_sz: int, num_classes: int, alpha: float = 0.9):
        super().__init__(mem_sz)
        if not 0.0 < alpha < 1.0:
            raise ConfigError(f"mean-of-features decay must lie in (0, 1), got {alpha}")
        self.quota = mem_sz // num_classes
        if self.quota < 1:
            raise ConfigError(f"mem_sz={mem_sz} leaves no room per class for {num_classes} classes")
        self.alpha = float(alpha)
        self.feature_dim: int | None = None
        self.means: dict[tuple[int, int], np.ndarray] = {}
        # heap entries are (-distance, seq, slot): heap[0] is the farthest
        self.heaps: dict[tuple[int, int], list] = {}

    @property
    def slots(self) -> list[MemorySlot]:
        return sorted((e[2] for h in self.heaps.values() for e in h), key=lambda s: s.seq)

    def max_distance(self, task_id: int, label: int) -> float:
        heap = self.heaps.get((task_id, label))
        return -heap[0][0] if heap else math.inf

    def update(self, task_id, batch, rng=None, features=None):
        features = _check_features(features, batch)
        if self.feature_dim is None:
            self.feature_dim = features.shape[1]
        elif features.shape[1] != self.feature_dim:
            raise ShapeError(f"feature width {features.shape[1]} != {self.feature_dim}")
        for x, y, phi in zip(batch.inputs, batch.labels, features):
            key = (int(task_id), int(y))
            if key in self.means:
                self.means[key] = self.alpha * self.means[key] + (1.0 - self.alpha) * phi
            else:
                self.means[key] = phi.copy()
            d = float(np.linalg.norm(phi - self.means[key]))
            heap = self.heaps.setdefault(key, [])
            if len(heap) < self.quota:
                slot = self._slot(x, y, task_id, d)
                heapq.heappush(heap, (-d, slot.seq, slot))
            elif -heap[0][0] > d:
                slot = self._slot(x, y, task_id, d)
                heapq.heapreplace(heap, (-d, slot.seq, slot))
        self.n_seen += len(batch)
        return self


class HybridMemory(EpisodicMemory):
    """Reservoir sampling that turns into a class-balanced ring buffer.

    The switch fires, once and for good, when some class from an earlier
    task is down to at most one stored example.  At that point each class
    keeps a random subset of ``min(count, mem_sz // classes_seen)``.  From
    then on a class below quota takes free slots (or evicts the oldest
    example of the most crowded class), while a class at quota overwrites
    its own oldest example.

    ``start_in_ring=True`` applies the post-switch rule from the first
    write, giving a ring buffer that always uses the whole memory.
    """

    name = "hybrid"

    def __init__(self, mem_sz: int, start_in_ring: bool = False):
        super().__init__(mem_sz)
        self.mode = "ring" if start_in_ring else "reservoir"
        self.observed: dict[tuple[int, int], None] = {}
        self.switched_at: int | None = None  # n_seen when the switch fired
        self.switch_task: int | None = None
        self._slots: list[MemorySlot] = []
        if start_in_ring:
            self.name = "ring-full"

    @property
    def slots(self) -> list[MemorySlot]:
        return self._slots

    @property
    def quota(self) -> int:
        return max(1, self.mem_sz // max(1, len(self.observed)))

    def update(self, task_id, batch, rng, features=None, n=None):
        n = self.n_seen if n is None else n
        for y in batch.labels:
            self.observed.setdefault((int(task_id), int(y)), None)
        if self.mode == "reservoir":
            for j in range(len(batch)):
                slot = self._slot(batch.inputs[j], batch.labels[j], task_id)
                if len(self._slots) < self.mem_sz:
                    self._slots.append(slot)
                else:
                    i = int(rng.integers(0, n + j + 1))
                    if i < self.mem_sz:
                        self._slots[i] = slot
            self.n_seen = n + len(batch)
            if self._should_switch(task_id):
                self._switch(task_id, rng)
        else:
            for j in range(len(batch)):
                self._ring_write(self._slot(batch.inputs[j], batch.labels[j], task_id))
            self.n_seen = n + len(batch)
        return self

    def _should_switch(self, task_id: int) -> bool:
        counts = self.class_counts()
        return any(counts.get(key, 0) <= 1 for key in self.observed if key[0] < task_id)

    def _switch(self, task_id: int, rng: np.random.Generator) -> None:
        quota = self.quota
        by_class: dict[tuple[int, int], list[int]] = {}
        for i, s in enumerate(self._slots):
            by_class.setdefault((s.task_id, s.label), []).append(i)
        keep: list[int] = []
        for idx in by_class.values():
            if len(idx) > quota:
                idx = sorted(rng.choice(idx, size=quota, replace=False).tolist())
            keep.extend(idx)
        self._slots = [self._slots[i] for i in sorted(keep)]
        self.mode = "ring"
        self.switched_at = self.n_seen
        self.switch_task = int(task_id)

    def _ring_write(self, slot: MemorySlot) -> None:
        key = (slot.task_id, slot.label)
        quota = self.quota
        mine = [i for i, s in enumerate(self._slots) if (s.task_id, s.label) == key]
        if len(mine) >= quota:
            del self._slots[min(mine, key=lambda i: self._slots[i].seq)]
        elif len(self._slots) >= self.mem_sz:
            counts = self.class_counts()
            crowded = max(counts, key=lambda c: counts[c])
            victims = [i for i, s in enumerate(self._slots) if (s.task_id, s.label) == crowded]
            del self._slots[min(victims, key=lambda i: self._slots[i].seq)]
        self._slots.append(slot)


def make_memory(policy: str, mem_sz: int, num_classes: int, mof_alpha: float = 0.9) -> EpisodicMemory:
    """Build a memory by policy name; ``num_classes`` is the total over all tasks."""
    if policy == "reservoir":
        return ReservoirMemory(mem_sz)
    if policy == "ring":
        return RingMemory(mem_sz, num_classes)
    if policy == "kmeans":
        return KMeansMemory(mem_sz, num_classes)
    if policy == "mof":
        return MeanOfFeaturesMemory(mem_sz, num_classes, mof_alpha)
    if policy == "hybrid":
        return HybridMemory(mem_sz)
    if policy == "ring-full":
        return HybridMemory(mem_sz, start_in_ring=True)
    raise ConfigError(f"unknown memory policy {policy!r}; choose from {POLICIES}")
