"""Time-indexed central repository with emulated delivery latency.

Producers deposit tick-stamped payloads; consumers only see an item once
its delivery tick has been reached. Reads are wait-free: a fetch grabs the
current log reference for its key and scans it without taking any lock,
regardless of concurrent deposits. Writers serialize per key.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Any, Optional

from .core import SimClock, latency_to_ticks

RETAIN_PER_KEY = 64


@dataclass(frozen=True)
class TimedItem:
    vehicle_id: int
    kind: str
    produced_tick: int
    delivery_tick: int
    payload: Any


class Collector:
    """Append-only, per-key logs ordered by delivery tick.

    Per-key logs are replaced wholesale when trimmed to the retention bound,
    so a reader holding the old list still sees an internally consistent
    snapshot. Delivery ticks are clamped monotone per key (FIFO channel
    semantics): a later deposit can never become visible before an earlier
    one on the same key.
    """

    def __init__(self):
        self._logs: dict = {}
        self._locks: dict = {}
        self._registry_lock = threading.Lock()

    def _writer_lock(self, key) -> threading.Lock:
        with self._registry_lock:
            lock = self._locks.get(key)
            if lock is None:
                lock = self._locks[key] = threading.Lock()
            return lock

    def deposit(self, vehicle_id: int, kind: str, payload: Any,
                produced_tick: int, latency_ms: float, clock: SimClock) -> int:
        """Append an item; returns the tick at which it becomes visible."""
        delivery = produced_tick + latency_to_ticks(latency_ms, clock)
        return self.deposit_scheduled(vehicle_id, kind, payload, produced_tick, delivery)

    def deposit_scheduled(self, vehicle_id: int, kind: str, payload: Any,
                          produced_tick: int, delivery_tick: int) -> int:
        """Append an item whose delivery tick was resolved by the caller."""
        key = (vehicle_id, kind)
        with self._writer_lock(key):
            log = self._logs.get(key)
            if log is None:
                log = []
                self._logs[key] = log
            if log and delivery_tick < log[-1].delivery_tick:
                delivery_tick = log[-1].delivery_tick
            item = TimedItem(vehicle_id, kind, produced_tick, delivery_tick, payload)
            log.append(item)
            if len(log) > 2 * RETAIN_PER_KEY:
                # Copy-on-trim keeps concurrent readers consistent.
                self._logs[key] = log[-RETAIN_PER_KEY:]
            return delivery_tick

    def fetch_latest(self, vehicle_id: int, kind: str, now_tick: int) -> Optional[TimedItem]:
        """Newest item with delivery_tick <= now_tick, or None.

        Wait-free: bounded work, no locks, independent of concurrent writers.
        """
        log = self._logs.get((vehicle_id, kind))
        if not log:
            return None
        n = len(log)
        for i in range(n - 1, -1, -1):
            item = log[i]
            if item.delivery_tick <= now_tick:
                return item
        return None
