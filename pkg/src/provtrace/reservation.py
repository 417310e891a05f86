"""Per-label readers-writers reservations with deadlines.

Reservations are not tied to a thread: the grant that takes them may be
released by whichever thread later handles the report, or by the reaper.
"""

from __future__ import annotations

import enum
import threading
import time


class Mode(enum.Enum):
    SHARED = "shared"
    EXCLUSIVE = "exclusive"


class ExclusivityMonitor:
    """Counts states that break the readers-writers rule. Should stay at zero."""

    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.violations = 0
        self.checks = 0

    def observe(self, readers: int, writer: bool) -> None:
        bad = readers < 0 or (writer and readers > 0)
        with self._lock:
            self.checks += 1
            if bad:
                self.violations += 1


class Reservation:
    """Writer-preferring readers-writers reservation with bounded waits."""

    def __init__(self, monitor: ExclusivityMonitor | None = None) -> None:
        self._cond = threading.Condition(threading.Lock())
        self._readers = 0
        self._writer = False
        self._waiting_writers = 0
        self._monitor = monitor

    def _observe(self) -> None:
        if self._monitor is not None:
            self._monitor.observe(self._readers, self._writer)

    def acquire(self, mode: Mode, deadline: float) -> bool:
        """Wait until ``deadline`` (a ``time.monotonic`` value). Returns False on timeout."""
        with self._cond:
            if mode is Mode.SHARED:
                while self._writer or self._waiting_writers:
                    remaining = deadline - time.monotonic()
                    if remaining <= 0:
                        return False
                    self._cond.wait(remaining)
                self._readers += 1
            else:
                self._waiting_writers += 1
                try:
                    while self._writer or self._readers:
                        remaining = deadline - time.monotonic()
                        if remaining <= 0:
                            return False
                        self._cond.wait(remaining)
                finally:
                    self._waiting_writers -= 1
                    if not self._waiting_writers:
                        # Readers held back by this writer may proceed.
                        self._cond.notify_all()
                self._writer = True
            self._observe()
            return True

    def release(self, mode: Mode) -> None:
        with self._cond:
            if mode is Mode.SHARED:
                self._readers -= 1
            else:
                if not self._writer and self._monitor is not None:
                    self._monitor.observe(-1, False)
                self._writer = False
            self._observe()
            self._cond.notify_all()

    @property
    def holders(self) -> int:
        with self._cond:
            return self._readers + (1 if self._writer else 0)

    def state(self) -> tuple[int, bool]:
        with self._cond:
            return self._readers, self._writer
