"""Injectable clocks so scheduling and budget periods are reproducible in tests."""

from __future__ import annotations

import threading
from datetime import datetime, timedelta, timezone
from typing import Protocol


class Clock(Protocol):
    def now(self) -> datetime: ...


class SystemClock:
    def now(self) -> datetime:
        return datetime.now(timezone.utc)


class VirtualClock:
    """A manually advanced clock; time never moves backwards."""

    def __init__(self, start: datetime):
        if start.tzinfo is None:
            raise ValueError("virtual clock start must be timezone-aware")
        self._now = start.astimezone(timezone.utc)
        self._lock = threading.Lock()

    def now(self) -> datetime:
        with self._lock:
            return self._now

    def advance(self, seconds: float) -> datetime:
        if seconds < 0:
            raise ValueError("cannot advance by a negative interval")
        with self._lock:
            self._now += timedelta(seconds=seconds)
            return self._now

    def advance_to(self, instant: datetime) -> datetime:
        instant = instant.astimezone(timezone.utc)
        with self._lock:
            if instant > self._now:
                self._now = instant
            return self._now
