"""Experience storage: FIFO queue, proportional prioritized replay, episode buffer."""
from __future__ import annotations

import itertools
import threading
from collections import OrderedDict, deque
from dataclasses import dataclass
from typing import Any, Hashable

import numpy as np

from .errors import (EmptyBuffer, FinishEmptyEpisode, NonPositivePriority, UnknownEpisode,
                     UnknownId)
from .learn import Trajectory, Transition

FIFO_CAPACITY = 4096
PRIORITIZED_CAPACITY = 16384


@dataclass
class ReplayEntry:
    id: int
    payload: Any
    priority: float
    insert_time: int


class SumTree:
    """Binary tree of partial sums over a fixed number of leaves."""

    def __init__(self, capacity: int):
        self.capacity = int(capacity)
        size = 1
        while size < self.capacity:
            size *= 2
        self._leaves = size
        self.tree = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.tree[1])

    def __getitem__(self, leaf: int) -> float:
        return float(self.tree[self._leaves + leaf])

    def update(self, leaf: int, value: float) -> None:
        i = self._leaves + leaf
        self.tree[i] = value
        i //= 2
        while i >= 1:
            self.tree[i] = self.tree[2 * i] + self.tree[2 * i + 1]
            i //= 2

    def find(self, mass: float) -> int:
        """Leaf whose cumulative interval contains ``mass`` in ``[0, total)``."""
        i = 1
        while i < self._leaves:
            left = self.tree[2 * i]
            if mass < left or self.tree[2 * i + 1] <= 0.0:
                i = 2 * i
            else:
                mass -= left
                i = 2 * i + 1
        return i - self._leaves

    def audit(self) -> bool:
        """True when every internal node equals the sum of its two children."""
        inner = np.arange(1, self._leaves)
        return bool(np.array_equal(self.tree[inner], self.tree[2 * inner] + self.tree[2 * inner + 1]))


class FIFOBuffer:
    def __init__(self, capacity: int = FIFO_CAPACITY):
        self.capacity = capacity
        self._entries: deque[ReplayEntry] = deque()
        self._ids = itertools.count()
        self._clock = itertools.count()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._entries)

    def push(self, trajectory, priority: float | None = None) -> int:
        with self._lock:
            entry = ReplayEntry(next(self._ids), trajectory, 1.0, next(self._clock))
            self._entries.append(entry)
            if len(self._entries) > self.capacity:
                self._entries.popleft()
            return entry.id

    def sample(self, k: int, rng: np.random.Generator) -> list[tuple[int, Any]]:
        with self._lock:
            if not self._entries:
                raise EmptyBuffer("sample from empty buffer")
            if k > len(self._entries):
                raise ValueError(f"cannot draw {k} without replacement from {len(self._entries)} entries")
            idx = rng.choice(len(self._entries), size=k, replace=False)
            return [(self._entries[i].id, self._entries[i].payload) for i in idx]

    def pop(self, k: int) -> list[Any]:
        """Remove and return up to ``k`` oldest payloads."""
        with self._lock:
            return [self._entries.popleft().payload for _ in range(min(k, len(self._entries)))]

    def ids(self) -> list[int]:
        return [e.id for e in self._entries]


class PrioritizedBuffer:
    """Proportional prioritized replay; draws with replacement, evicts oldest first."""

    def __init__(self, capacity: int = PRIORITIZED_CAPACITY):
        self.capacity = capacity
        self.tree = SumTree(capacity)
        self._slots: list[ReplayEntry | None] = [None] * capacity
        self._slot_of: dict[int, int] = {}
        self._next_slot = 0
        self._ids = itertools.count()
        self._clock = itertools.count()
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._slot_of)

    @property
    def total_priority(self) -> float:
        return self.tree.total

    def push(self, payload, priority: float) -> int:
        if not priority > 0:
            raise NonPositivePriority(f"priority must be positive, got {priority}")
        with self._lock:
            slot = self._next_slot
            self._next_slot = (slot + 1) % self.capacity
            old = self._slots[slot]
            if old is not None:
                del self._slot_of[old.id]
            entry = ReplayEntry(next(self._ids), payload, float(priority), next(self._clock))
            self._slots[slot] = entry
            self._slot_of[entry.id] = slot
            self.tree.update(slot, entry.priority)
            return entry.id

    def sample(self, k: int, rng: np.random.Generator) -> list[tuple[int, Any]]:
        with self._lock:
            if not self._slot_of:
                raise EmptyBuffer("sample from empty buffer")
            total = self.tree.total
            out = []
            for u in rng.random(k):
                slot = self.tree.find(u * total)
                entry = self._slots[slot]
                out.append((entry.id, entry.payload))
            return out

    def update_priorities(self, ids, new_priorities) -> None:
        ids = list(ids)
        pr = [float(p) for p in new_priorities]
        if len(ids) != len(pr):
            raise ValueError("ids and priorities differ in length")
        with self._lock:
            for i, p in zip(ids, pr):
                if i not in self._slot_of:
                    raise UnknownId(f"no live entry with id {i}")
                if not p > 0:
                    raise NonPositivePriority(f"priority must be positive, got {p}")
            for i, p in zip(ids, pr):
                slot = self._slot_of[i]
                self._slots[slot].priority = p
                self.tree.update(slot, p)

    def priority(self, entry_id: int) -> float:
        return self._slots[self._slot_of[entry_id]].priority

    def ids(self) -> list[int]:
        return sorted(self._slot_of)

    def audit(self) -> bool:
        live = sum(e.priority for e in self._slots if e is not None)
        return self.tree.audit() and np.isclose(self.tree.total, live, rtol=1e-9, atol=1e-12)


def push(buffer, trajectory, priority: float | None = None) -> int:
    return buffer.push(trajectory, priority)


def sample(buffer, k: int, rng) -> list[tuple[int, Any]]:
    return buffer.sample(k, rng)


def update_priorities(buffer: PrioritizedBuffer, ids, new_priorities) -> None:
    buffer.update_priorities(ids, new_priorities)


class EpisodeBuffer:
    """Per-episode staging area; trajectories become visible only once finished."""

    def __init__(self):
        self.unfinished: "OrderedDict[Hashable, list[Transition]]" = OrderedDict()
        self.finished: deque[Trajectory] = deque()
        self._lock = threading.Lock()

    def append_step(self, episode_key: Hashable, transition: Transition) -> None:
        with self._lock:
            self.unfinished.setdefault(episode_key, []).append(transition)

    def finish(self, episode_key: Hashable, bootstrap_value: float = 0.0, **meta) -> Trajectory:
        with self._lock:
            if episode_key not in self.unfinished:
                raise UnknownEpisode(f"no unfinished episode {episode_key!r}")
            steps = self.unfinished[episode_key]
            if not steps:
                raise FinishEmptyEpisode(f"episode {episode_key!r} has no steps")
            del self.unfinished[episode_key]
            traj = Trajectory(steps, float(bootstrap_value), meta=dict(meta, key=episode_key))
            self.finished.append(traj)
            return traj

    def drain(self) -> list[Trajectory]:
        with self._lock:
            out = list(self.finished)
            self.finished.clear()
            return out


def append_step(ep_buffer: EpisodeBuffer, episode_key, transition) -> None:
    ep_buffer.append_step(episode_key, transition)


def finish(ep_buffer: EpisodeBuffer, episode_key, bootstrap_value: float = 0.0) -> Trajectory:
    return ep_buffer.finish(episode_key, bootstrap_value)
