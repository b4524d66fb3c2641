"""Versioned per-player parameter snapshots with atomic publication."""
from __future__ import annotations

import threading
import time
from typing import Callable

from ..errors import UnknownPlayer, VersionRegression, WaitTimeout
from ..policy import PolicyParameters


class ParameterStore:
    """Many readers, one writer per player.

    A snapshot is an immutable :class:`PolicyParameters`; publishing swaps the
    reference under a lock so readers always see one whole version.
    """

    def __init__(self):
        self._snapshots: dict[str, PolicyParameters] = {}
        self._cond = threading.Condition()
        self._subscribers: list[Callable[[str, PolicyParameters], None]] = []

    def register(self, params: PolicyParameters) -> int:
        with self._cond:
            self._snapshots[params.player_id] = params
            self._cond.notify_all()
            return params.version

    def players(self) -> list[str]:
        return sorted(self._snapshots)

    def subscribe(self, callback: Callable[[str, PolicyParameters], None]) -> None:
        self._subscribers.append(callback)

    def version(self, player_id: str) -> int:
        with self._cond:
            return self._get(player_id).version

    def _get(self, player_id):
        try:
            return self._snapshots[player_id]
        except KeyError:
            raise UnknownPlayer(f"player {player_id!r} is not registered") from None

    def publish(self, player_id: str, params: PolicyParameters) -> int:
        with self._cond:
            current = self._get(player_id)
            if params.version != current.version + 1:
                raise VersionRegression(
                    f"{player_id}: publishing v{params.version} over v{current.version}")
            self._snapshots[player_id] = params
            self._cond.notify_all()
        for cb in self._subscribers:
            cb(player_id, params)
        return params.version

    def fetch(self, player_id: str, wait_for: int | None = None,
              timeout: float | None = None) -> tuple[PolicyParameters, int]:
        """Latest snapshot, or block until version ``wait_for`` (or newer) is published."""
        deadline = None if timeout is None else time.monotonic() + timeout
        with self._cond:
            snap = self._get(player_id)
            while wait_for is not None and snap.version < wait_for:
                remaining = None if deadline is None else deadline - time.monotonic()
                if remaining is not None and remaining <= 0:
                    raise WaitTimeout(f"{player_id}: v{wait_for} not published within {timeout}s")
                self._cond.wait(remaining)
                snap = self._get(player_id)
            return snap, snap.version


def publish(store: ParameterStore, player_id: str, params: PolicyParameters) -> int:
    return store.publish(player_id, params)


def fetch(store: ParameterStore, player_id: str, mode: str | int = "latest", timeout: float | None = None):
    """``mode`` is ``"latest"`` or a version number to wait for."""
    return store.fetch(player_id, None if mode == "latest" else int(mode), timeout)
