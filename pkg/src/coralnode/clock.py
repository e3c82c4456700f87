"""Injected clocks. Engines never read wall time directly.

The server owns one ManualClock: in normal operation it is bumped from the
system clock before every state change; in test mode (or during log replay)
it only moves when told to, which is what makes scenarios and replays
deterministic.
"""

from __future__ import annotations

import threading
import time


class ManualClock:
    """Monotone non-decreasing integer-seconds clock under explicit control."""

    def __init__(self, start: int = 0):
        self._now = int(start)
        self._lock = threading.Lock()

    def now(self) -> int:
        with self._lock:
            return self._now

    def advance(self, delta: int) -> int:
        if delta < 0:
            raise ValueError("clock cannot move backwards")
        with self._lock:
            self._now += int(delta)
            return self._now

    def set_at_least(self, timestamp: int) -> int:
        """Move forward to `timestamp`; never backwards."""
        with self._lock:
            self._now = max(self._now, int(timestamp))
            return self._now


def system_now() -> int:
    return int(time.time())
