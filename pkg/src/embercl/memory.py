"""Bounded episodic memory with three update policies: per-class reservoir
sampling, per-class ring buffer, and a running mean of features per class.
Replay batches are drawn uniformly without replacement across classes.
"""
from __future__ import annotations

import enum
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import PolicyMismatchError
from .rng import TAG_MEMORY, derive_rng


class BufferPolicy(enum.Enum):
    RESERVOIR = "reservoir"
    RING = "ring"
    MEAN_OF_FEATURES = "mof"


@dataclass
class MemorySlot:
    feature: np.ndarray
    label_id: int
    source_task: int
    weight: float = 1.0  # running count under MEAN_OF_FEATURES, else 1.0


@dataclass
class MemoryStats:
    policy: BufferPolicy
    per_class_capacity: int
    per_class_counts: dict[int, int]
    seen_counts: dict[int, int]
    total_slots: int
    classes_observed: int

    @property
    def utilization(self) -> float:
        cap = self.per_class_capacity * self.classes_observed
        return self.total_slots / cap if cap else 0.0


class EpisodicMemory:
    """Per-class replay store. One writer at a time; sampling reads only.

    `stratified=False` switches the reservoir to a single global pool with
    capacity per_class_capacity * classes_observed (ablation switch).
    """

    def __init__(
        self,
        policy: BufferPolicy,
        per_class_capacity: int,
        seed: int = 0,
        rng: np.random.Generator | None = None,
        stratified: bool = True,
    ):
        if per_class_capacity < 0:
            raise ValueError(f"per_class_capacity must be >= 0, got {per_class_capacity}")
        self.policy = policy
        self.per_class_capacity = per_class_capacity
        self.stratified = stratified
        self.rng = rng if rng is not None else derive_rng(seed, TAG_MEMORY)
        self.slots: dict[int, object] = {}
        self.seen_counts: dict[int, int] = {}
        self.labels_observed: set[int] = set()
        self.op_count = 0  # structural slot operations, for O(1) assertions

    def insert(self, slot: MemorySlot) -> None:
        if self.policy is BufferPolicy.RESERVOIR:
            reservoir_update(self, slot)
        elif self.policy is BufferPolicy.RING:
            ring_update(self, slot)
        else:
            mof_update(self, slot)

    def class_slots(self, class_id: int) -> list[MemorySlot]:
        return list(self.slots.get(class_id, []))

    def all_slots(self) -> list[MemorySlot]:
        out: list[MemorySlot] = []
        for class_id in sorted(self.slots):
            out.extend(self.slots[class_id])
        return out

    def __len__(self) -> int:
        return sum(len(s) for s in self.slots.values())


def _check_policy(memory: EpisodicMemory, expected: BufferPolicy) -> None:
    if memory.policy is not expected:
        raise PolicyMismatchError(
            f"memory uses policy {memory.policy.value}, not {expected.value}"
        )


def _reservoir_key(memory: EpisodicMemory, slot: MemorySlot) -> int:
    # Global (non-stratified) reservoir pools every class under one key.
    return slot.label_id if memory.stratified else -1


def reservoir_update(memory: EpisodicMemory, slot: MemorySlot) -> None:
    """Streaming uniform sample: with n items seen and capacity M, the new
    item replaces a uniformly chosen resident with probability M/n."""
    _check_policy(memory, BufferPolicy.RESERVOIR)
    key = _reservoir_key(memory, slot)
    memory.labels_observed.add(slot.label_id)
    memory.seen_counts[key] = n = memory.seen_counts.get(key, 0) + 1
    capacity = memory.per_class_capacity
    if not memory.stratified:
        capacity *= len(memory.labels_observed)
    if capacity == 0:
        return
    bucket = memory.slots.setdefault(key, [])
    if len(bucket) < capacity:
        bucket.append(slot)
        memory.op_count += 1
    else:
        j = int(memory.rng.integers(n))
        if j < capacity:
            bucket[j] = slot
        memory.op_count += 1


def ring_update(memory: EpisodicMemory, slot: MemorySlot) -> None:
    """Per-class FIFO: append, evicting that class's oldest when full."""
    _check_policy(memory, BufferPolicy.RING)
    key = slot.label_id
    memory.seen_counts[key] = memory.seen_counts.get(key, 0) + 1
    if memory.per_class_capacity == 0:
        return
    bucket = memory.slots.get(key)
    if bucket is None:
        bucket = memory.slots[key] = deque(maxlen=memory.per_class_capacity)
    bucket.append(slot)  # deque drops the oldest itself at capacity
    memory.op_count += 1


def mof_update(memory: EpisodicMemory, slot: MemorySlot) -> None:
    """Keep one slot per class holding the running mean of its features;
    the slot weight is the running count."""
    _check_policy(memory, BufferPolicy.MEAN_OF_FEATURES)
    key = slot.label_id
    memory.seen_counts[key] = n = memory.seen_counts.get(key, 0) + 1
    feature = np.asarray(slot.feature, dtype=np.float64)
    bucket = memory.slots.get(key)
    if bucket is None:
        memory.slots[key] = [MemorySlot(feature.copy(), key, slot.source_task, weight=1.0)]
    else:
        mean_slot = bucket[0]
        if mean_slot.feature.shape != feature.shape:
            raise ValueError(
                f"feature dim changed mid-stream for class {key}: "
                f"{mean_slot.feature.shape} vs {feature.shape}"
            )
        mean_slot.feature += (feature - mean_slot.feature) / n
        mean_slot.weight = float(n)
        mean_slot.source_task = slot.source_task
    memory.op_count += 1


def sample_replay(memory: EpisodicMemory, k: int, rng: np.random.Generator) -> list[MemorySlot]:
    """Draw min(k, stored) slots uniformly without replacement. Under
    MEAN_OF_FEATURES the per-class mean slots are cycled when k exceeds the
    class count, so the batch still reaches k."""
    if k < 0:
        raise ValueError(f"k must be >= 0, got {k}")
    if k == 0:
        return []
    flat = memory.all_slots()
    if not flat:
        return []
    if memory.policy is BufferPolicy.MEAN_OF_FEATURES and k > len(flat):
        order = rng.permutation(len(flat))
        return [flat[order[i % len(flat)]] for i in range(k)]
    k_eff = min(k, len(flat))
    idx = rng.choice(len(flat), size=k_eff, replace=False)
    return [flat[i] for i in idx]


def memory_stats(memory: EpisodicMemory) -> MemoryStats:
    per_class = {c: len(b) for c, b in memory.slots.items()}
    return MemoryStats(
        policy=memory.policy,
        per_class_capacity=memory.per_class_capacity,
        per_class_counts=per_class,
        seen_counts=dict(memory.seen_counts),
        total_slots=sum(per_class.values()),
        classes_observed=len(memory.seen_counts),
    )
