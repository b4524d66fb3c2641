"""Coordination topologies between actors and learners.

Each coordinator is a linearizable state machine guarded by a lock. It never
sleeps or spawns threads itself, so the same objects are driven both by real
threads and by the single-threaded simulated-clock scheduler in
:mod:`ddrl.runtime`.
"""
from __future__ import annotations

import math
import threading
import time
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from ..errors import InferenceTimeout, MixedVersions, QueueFull, ShapeMismatch
from ..learn import Trajectory
from ..policy import GradientUpdate, PolicyParameters, apply_gradient, infer_batch
from .store import ParameterStore

KINDS = ("async_gradient", "async_trajectory", "central_inference", "sync_barrier",
         "sync_quorum", "bundled_allreduce", "replay_qlearning")
SYNC_KINDS = ("sync_barrier", "sync_quorum", "bundled_allreduce")


@dataclass(frozen=True)
class TopologyConfig:
    kind: str = "async_trajectory"
    actor_count: int = 2
    learner_count: int = 1
    quorum_fraction: float = 1.0
    drop_fraction: float = 0.0
    max_staleness: int | None = None
    inference_batch_max: int = 8
    inference_timeout: float = 5.0
    batch_size: int = 4

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown topology kind {self.kind!r}")
        if self.actor_count < 1 or self.learner_count < 1:
            raise ValueError("actor_count and learner_count must be >= 1")
        if not 0.0 < self.quorum_fraction <= 1.0:
            raise ValueError("quorum_fraction must lie in (0, 1]")
        if not 0.0 <= self.drop_fraction < 1.0:
            raise ValueError("drop_fraction must lie in [0, 1)")
        if self.batch_size < 1 or self.inference_batch_max < 1:
            raise ValueError("batch sizes must be >= 1")


@dataclass(frozen=True)
class Applied:
    version: int


@dataclass(frozen=True)
class Dropped:
    reason: str


@dataclass(frozen=True)
class Pending:
    """Gradient held at a barrier until the epoch completes."""

    epoch: int


@dataclass(frozen=True)
class Queued:
    depth: int


@dataclass(frozen=True)
class LagRecord:
    actor_version: int
    learner_version: int
    delta: int
    timestamp: float


@dataclass
class LagSummary:
    count: int = 0
    min: float = 0.0
    mean: float = 0.0
    max: float = 0.0
    histogram: dict[int, int] = field(default_factory=dict)


def lag_stats(records: Sequence[LagRecord] | object, window: int | None = None) -> LagSummary:
    """Summary over the last ``window`` records (all when ``None``)."""
    recs = list(getattr(records, "lag_records", records))
    if window is not None:
        recs = recs[len(recs) - window:] if window > 0 else []
    if not recs:
        return LagSummary()
    d = np.array([r.delta for r in recs], dtype=float)
    return LagSummary(len(recs), float(d.min()), float(d.mean()), float(d.max()),
                      dict(sorted(Counter(int(x) for x in d).items())))


def mean_update(updates: Sequence[GradientUpdate], base_version: int, producer_id: str = "mean") -> GradientUpdate:
    """Average of per-update mean gradients, summed in producer_id order."""
    ordered = sorted(updates, key=lambda u: u.producer_id)
    acc = np.zeros_like(np.asarray(ordered[0].grad, dtype=np.float64))
    for u in ordered:
        acc += np.asarray(u.grad, dtype=np.float64) / u.sample_count
    acc /= len(ordered)
    return GradientUpdate(acc, base_version, 1, producer_id)


class _Learner:
    def __init__(self, store: ParameterStore, player_id: str, learning_rate: float,
                 clock: Callable[[], float] | None = None):
        self.store = store
        self.player_id = player_id
        self.learning_rate = learning_rate
        self.clock = clock or time.monotonic
        self.lag_records: list[LagRecord] = []
        self.publish_times: list[float] = []
        self._lock = threading.RLock()

    def _apply(self, update: GradientUpdate) -> int:
        params, _ = self.store.fetch(self.player_id)
        new = apply_gradient(params, update, self.learning_rate)
        v = self.store.publish(self.player_id, new)
        self.publish_times.append(self.clock())
        return v

    def _record_lag(self, actor_version: int, learner_version: int):
        self.lag_records.append(LagRecord(actor_version, learner_version,
                                          learner_version - actor_version, self.clock()))


class GradientCoordinator(_Learner):
    """Gradient exchange: ``async_gradient``, ``sync_barrier`` or ``sync_quorum``."""

    def __init__(self, store, player_id, kind="async_gradient", actor_count=1, learning_rate=0.1,
                 quorum_fraction=1.0, max_staleness=None, clock=None):
        super().__init__(store, player_id, learning_rate, clock)
        if kind not in ("async_gradient", "sync_barrier", "sync_quorum"):
            raise ValueError(f"GradientCoordinator does not handle {kind!r}")
        self.kind = kind
        self.actor_count = actor_count
        self.max_staleness = max_staleness
        if kind == "sync_barrier":
            self.required = actor_count
        elif kind == "sync_quorum":
            self.required = max(1, math.ceil(quorum_fraction * actor_count - 1e-9))
        else:
            self.required = 1
        self._pending: dict[str, GradientUpdate] = {}
        self.consumed: list[GradientUpdate] = []
        self.dropped: list[tuple[GradientUpdate, str]] = []
        self.applied_means: list[GradientUpdate] = []

    @property
    def pending(self) -> list[GradientUpdate]:
        return list(self._pending.values())

    def submit_gradient(self, update: GradientUpdate):
        with self._lock:
            snap, current = self.store.fetch(self.player_id)
            if np.shape(update.grad) != (snap.arch.size,):
                raise ShapeMismatch(f"gradient length {np.size(update.grad)} != {snap.arch.size}")
            staleness = current - update.base_version
            if self.kind == "async_gradient":
                if self.max_staleness is not None and staleness > self.max_staleness:
                    self.dropped.append((update, "stale"))
                    return Dropped("stale")
                self._record_lag(update.base_version, current)
                self.consumed.append(update)
                return Applied(self._apply(update))
            if staleness > 0:
                self.dropped.append((update, "late"))
                return Dropped("late")
            if staleness < 0:
                raise ValueError(f"gradient from future version {update.base_version} (current {current})")
            if update.producer_id in self._pending:
                raise ValueError(f"{update.producer_id} already submitted for epoch {current}")
            self._pending[update.producer_id] = update
            if len(self._pending) < self.required:
                return Pending(current)
            batch = list(self._pending.values())
            self._pending.clear()
            mean = mean_update(batch, current)
            for u in batch:
                self._record_lag(u.base_version, current)
            self.consumed.extend(batch)
            self.applied_means.append(mean)
            return Applied(self._apply(mean))


def submit_gradient(coordinator: GradientCoordinator, update: GradientUpdate):
    return coordinator.submit_gradient(update)


class TrajectoryCoordinator(_Learner):
    """Trajectory exchange through a bounded queue consumed in fixed-size batches."""

    def __init__(self, store, player_id, capacity=64, batch_size=4, max_staleness=None,
                 learning_rate=0.1, clock=None):
        super().__init__(store, player_id, learning_rate, clock)
        self.capacity = capacity
        self.batch_size = batch_size
        self.max_staleness = max_staleness
        self.queue: deque[Trajectory] = deque()
        self.dropped: list[Trajectory] = []
        self.consumed: list[Trajectory] = []

    def __len__(self):
        return len(self.queue)

    def submit_trajectory(self, traj: Trajectory):
        with self._lock:
            current = self.store.version(self.player_id)
            if self.max_staleness is not None and current - traj.param_version > self.max_staleness:
                self.dropped.append(traj)
                return Dropped("stale")
            if len(self.queue) >= self.capacity:
                raise QueueFull(f"trajectory queue at capacity {self.capacity}")
            self.queue.append(traj)
            return Queued(len(self.queue))

    def take_batch(self) -> list[Trajectory] | None:
        with self._lock:
            if len(self.queue) < self.batch_size:
                return None
            return [self.queue.popleft() for _ in range(self.batch_size)]

    def learn(self, batch: list[Trajectory],
              grad_fn: Callable[[PolicyParameters, list[Trajectory]], GradientUpdate]) -> int:
        """Compute a gradient on ``batch`` with the current snapshot, apply and publish."""
        with self._lock:
            params, current = self.store.fetch(self.player_id)
            for t in batch:
                self._record_lag(t.param_version, current)
            self.consumed.extend(batch)
            return self._apply(grad_fn(params, batch))

    def consume(self, grad_fn) -> int | None:
        batch = self.take_batch()
        return None if batch is None else self.learn(batch, grad_fn)


def submit_trajectory(coordinator: TrajectoryCoordinator, traj: Trajectory):
    return coordinator.submit_trajectory(traj)


@dataclass
class InferenceRequest:
    ticket: int
    player_id: str
    observation: np.ndarray
    mask: np.ndarray
    uniform: float
    arrival: float


class InferenceBatcher:
    """Learner-side batched inference core, independent of any clock.

    Requests accumulate until ``batch_max`` are waiting or the oldest has waited
    ``timeout``; :meth:`flush` then answers all of them with one forward pass
    per player on the current snapshot.
    """

    def __init__(self, store: ParameterStore, batch_max: int = 8, timeout: float = 5.0,
                 clock: Callable[[], float] | None = None):
        self.store = store
        self.batch_max = batch_max
        self.timeout = timeout
        self.clock = clock or time.monotonic
        self._pending: list[InferenceRequest] = []
        self._tickets = 0
        self.batch_calls = 0
        self.batch_sizes: list[int] = []
        self.behavior_log: list[tuple[str, int, int, float]] = []

    def __len__(self):
        return len(self._pending)

    def submit(self, player_id, observation, mask, uniform) -> int:
        self.store.fetch(player_id)  # raises UnknownPlayer
        self._tickets += 1
        self._pending.append(InferenceRequest(self._tickets, player_id, np.asarray(observation, dtype=np.float64),
                                              np.asarray(mask, dtype=bool), float(uniform), self.clock()))
        return self._tickets

    @property
    def deadline(self) -> float | None:
        return self._pending[0].arrival + self.timeout if self._pending else None

    def due(self, now: float | None = None) -> bool:
        if not self._pending:
            return False
        now = self.clock() if now is None else now
        return len(self._pending) >= self.batch_max or now >= self.deadline

    def flush(self) -> dict[int, tuple[int, float, float, int]]:
        """Answer every pending request: ``ticket -> (action, log_prob, value, version)``."""
        pending, self._pending = self._pending, []
        out = {}
        groups: dict[str, list[InferenceRequest]] = {}
        for r in pending:
            groups.setdefault(r.player_id, []).append(r)
        for pid in sorted(groups):
            reqs = groups[pid]
            params, version = self.store.fetch(pid)
            obs = np.stack([r.observation for r in reqs]) if params.arch.obs_dim else np.zeros((len(reqs), 0))
            acts, logps, vals, _, _ = infer_batch(params, obs, np.stack([r.mask for r in reqs]),
                                                  [r.uniform for r in reqs])
            self.batch_calls += 1
            self.batch_sizes.append(len(reqs))
            for r, a, lp, v in zip(reqs, acts, logps, vals):
                out[r.ticket] = (int(a), float(lp), float(v), version)
                self.behavior_log.append((pid, version, int(a), float(lp)))
        return out


class ThreadedInferenceBatcher:
    """Wall-clock front end: callers block in :meth:`request` until their batch is served."""

    def __init__(self, store: ParameterStore, batch_max: int = 8, timeout: float = 0.05):
        self.core = InferenceBatcher(store, batch_max, timeout)
        self._cond = threading.Condition()
        self._results: dict[int, tuple] = {}
        self._closed = False
        self._thread = threading.Thread(target=self._serve, daemon=True)
        self._thread.start()

    def request(self, player_id, observation, mask, rng: np.random.Generator, timeout: float | None = None):
        with self._cond:
            if self._closed:
                raise InferenceTimeout("batcher is shut down")
            ticket = self.core.submit(player_id, observation, mask, rng.random())
            self._cond.notify_all()
            ok = self._cond.wait_for(lambda: ticket in self._results or self._closed, timeout)
            if ticket not in self._results:
                raise InferenceTimeout("batcher shut down" if ok else "no response within timeout")
            a, lp, v, _ = self._results.pop(ticket)
            return a, lp, v

    def _serve(self):
        with self._cond:
            while not self._closed:
                if self.core.due():
                    self._results.update(self.core.flush())
                    self._cond.notify_all()
                    continue
                deadline = self.core.deadline
                self._cond.wait(None if deadline is None else max(0.0, deadline - time.monotonic()))

    def shutdown(self):
        with self._cond:
            self._closed = True
            self._cond.notify_all()
        self._thread.join()


def central_inference(batcher: ThreadedInferenceBatcher, request, rng: np.random.Generator, timeout=None):
    """``request`` is ``(player_id, observation, mask)``."""
    player_id, obs, mask = request
    return batcher.request(player_id, obs, mask, rng, timeout)


def allreduce_survivors(units: Sequence[tuple[GradientUpdate, int]], drop_fraction: float) -> list[GradientUpdate]:
    """Units kept after discarding the slowest ``floor(drop_fraction * n)`` by arrival order."""
    if not units:
        raise ValueError("allreduce needs at least one unit")
    if len({u.base_version for u, _ in units}) > 1:
        raise MixedVersions("units computed gradients at different base versions")
    n_drop = int(math.floor(drop_fraction * len(units) + 1e-9))
    ordered = sorted(units, key=lambda ua: (ua[1], ua[0].producer_id))
    return [u for u, _ in ordered[:len(units) - n_drop]]


def allreduce_apply(units: Sequence[tuple[GradientUpdate, int]], drop_fraction: float = 0.0,
                    store: ParameterStore | None = None, player_id: str | None = None,
                    learning_rate: float | None = None) -> GradientUpdate:
    """Mean gradient of the surviving units; applied and published when a store is given."""
    kept = allreduce_survivors(units, drop_fraction)
    mean = mean_update(kept, kept[0].base_version, "allreduce")
    if store is not None:
        params, _ = store.fetch(player_id)
        store.publish(player_id, apply_gradient(params, mean, learning_rate))
    return mean


class AllreduceCoordinator(_Learner):
    """Bundled actor-learner units that average gradients once enough units report.

    The epoch closes after ``n - floor(drop_fraction * n)`` arrivals; the
    remaining stragglers are excluded and their late gradients dropped.
    """

    def __init__(self, store, player_id, unit_count, drop_fraction=0.0, learning_rate=0.1, clock=None):
        super().__init__(store, player_id, learning_rate, clock)
        self.unit_count = unit_count
        self.drop_fraction = drop_fraction
        self.keep = unit_count - int(math.floor(drop_fraction * unit_count + 1e-9))
        self._arrivals: list[tuple[GradientUpdate, int]] = []
        self.consumed: list[GradientUpdate] = []
        self.dropped: list[tuple[GradientUpdate, str]] = []
        self.applied_means: list[GradientUpdate] = []

    def submit_gradient(self, update: GradientUpdate):
        with self._lock:
            snap, current = self.store.fetch(self.player_id)
            if np.shape(update.grad) != (snap.arch.size,):
                raise ShapeMismatch(f"gradient length {np.size(update.grad)} != {snap.arch.size}")
            if update.base_version != current:
                self.dropped.append((update, "late"))
                return Dropped("late")
            self._arrivals.append((update, len(self._arrivals)))
            if len(self._arrivals) < self.keep:
                return Pending(current)
            units, self._arrivals = self._arrivals, []
            mean = allreduce_apply(units, 0.0)
            for u, _ in units:
                self._record_lag(u.base_version, current)
                self.consumed.append(u)
            self.applied_means.append(mean)
            return Applied(self._apply(mean))
