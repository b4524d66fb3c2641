"""Deterministic discrete-event scheduler and seeded delay injection.

Processes are generators. A process yields either

* a number ``d``: resume after ``d`` simulated ticks (``inf`` parks it forever),
* an :class:`Event`: resume when the event fires, receiving its value,
* ``(d, event)``: whichever comes first; the process receives ``(fired, value)``.

Ties are broken by scheduling order, so a run is a pure function of its inputs.
"""
from __future__ import annotations

import heapq
import itertools
import math
from dataclasses import dataclass
from typing import Any, Callable, Generator

import numpy as np

from ..errors import UnknownWorker


class Event:
    def __init__(self, sim: "Scheduler"):
        self.sim = sim
        self.fired = False
        self.value: Any = None
        self._waiters: list[Callable[[Any], None]] = []

    def fire(self, value: Any = None) -> None:
        if self.fired:
            return
        self.fired = True
        self.value = value
        waiters, self._waiters = self._waiters, []
        for w in waiters:
            self.sim.call_at(self.sim.now, w, value)

    def _add(self, cb):
        if self.fired:
            self.sim.call_at(self.sim.now, cb, self.value)
        else:
            self._waiters.append(cb)


class Scheduler:
    def __init__(self):
        self.now = 0.0
        self._queue: list = []
        self._seq = itertools.count()
        self.steps = 0

    def event(self) -> Event:
        return Event(self)

    def call_at(self, t: float, fn: Callable, *args) -> None:
        if math.isinf(t):
            return
        heapq.heappush(self._queue, (t, next(self._seq), fn, args))

    def process(self, gen: Generator) -> None:
        self.call_at(self.now, self._resume, gen, None)

    def _resume(self, gen, value):
        try:
            cmd = gen.send(value)
        except StopIteration:
            return
        if isinstance(cmd, Event):
            cmd._add(lambda v: self._resume(gen, v))
        elif isinstance(cmd, tuple):
            delay, ev = cmd
            done = [False]

            def wake(fired, v):
                if not done[0]:
                    done[0] = True
                    self._resume(gen, (fired, v))

            self.call_at(self.now + delay, wake, False, None)
            ev._add(lambda v: wake(True, v))
        else:
            self.call_at(self.now + float(cmd), self._resume, gen, None)

    def run(self, until: float | None = None) -> None:
        while self._queue:
            t, _, fn, args = self._queue[0]
            if until is not None and t > until:
                self.now = until
                return
            heapq.heappop(self._queue)
            self.now = t
            self.steps += 1
            fn(*args)

    @property
    def idle(self) -> bool:
        return not self._queue


@dataclass(frozen=True)
class Distribution:
    kind: str
    a: float = 0.0
    b: float = 0.0

    def draw(self, rng: np.random.Generator, n: int = 1) -> float:
        """Total of ``n`` independent draws."""
        if n <= 0:
            return 0.0
        if self.kind == "const":
            return self.a * n
        if self.kind == "halt":
            return math.inf
        if self.kind == "uniform":
            return float(rng.uniform(self.a, self.b, n).sum())
        return float(rng.exponential(self.a, n).sum())


def parse_distribution(spec: str | float) -> Distribution:
    """``"5"``, ``"const:5"``, ``"uniform:lo:hi"``, ``"exp:mean"`` or ``"halt"``."""
    if isinstance(spec, (int, float)):
        return Distribution("const", float(spec))
    s = spec.strip().lower()
    parts = s.split(":")
    try:
        if s == "halt":
            return Distribution("halt")
        if len(parts) == 1:
            return Distribution("const", float(parts[0]))
        if parts[0] == "const" and len(parts) == 2:
            return Distribution("const", float(parts[1]))
        if parts[0] == "uniform" and len(parts) == 3:
            lo, hi = float(parts[1]), float(parts[2])
            if hi < lo:
                raise ValueError
            return Distribution("uniform", lo, hi)
        if parts[0] in ("exp", "exponential") and len(parts) == 2:
            return Distribution("exp", float(parts[1]))
    except ValueError:
        pass
    raise ValueError(f"bad delay distribution {spec!r}")


class DelayHarness:
    """Per-(worker, operation) extra delays on top of base operation costs.

    Each (worker, operation) pair owns an RNG stream derived from the seed, so
    draws do not depend on how workers interleave.
    """

    def __init__(self, workers, seed: int = 0):
        self.workers = set(workers)
        self.seed = seed
        self.table: dict[tuple[str, str], Distribution] = {}
        self._rngs: dict[tuple[str, str], np.random.Generator] = {}
        self.log: list[tuple[float, str, str, float]] = []

    def inject_delay(self, worker_id: str, operation_kind: str, distribution) -> None:
        if worker_id not in self.workers:
            raise UnknownWorker(f"no worker {worker_id!r}")
        dist = distribution if isinstance(distribution, Distribution) else parse_distribution(distribution)
        self.table[(worker_id, operation_kind)] = dist

    def halted(self, worker_id: str, operation_kind: str) -> bool:
        d = self.table.get((worker_id, operation_kind))
        return d is not None and d.kind == "halt"

    def cost(self, now: float, worker_id: str, operation_kind: str, base: float, n: int = 1) -> float:
        total = base * n
        dist = self.table.get((worker_id, operation_kind))
        if dist is not None:
            key = (worker_id, operation_kind)
            if key not in self._rngs:
                digest = sum(ord(c) * 131 ** i for i, c in enumerate(f"{worker_id}/{operation_kind}")) % (2 ** 32)
                self._rngs[key] = np.random.default_rng([self.seed & 0xFFFFFFFF, digest])
            total += dist.draw(self._rngs[key], n)
        self.log.append((now, worker_id, operation_kind, total))
        return total


def inject_delay(harness: DelayHarness, worker_id: str, operation_kind: str, distribution) -> None:
    harness.inject_delay(worker_id, operation_kind, distribution)
