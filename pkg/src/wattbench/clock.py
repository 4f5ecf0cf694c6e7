"""Real and virtual clocks.

Everything that sleeps or timestamps in this package goes through a clock
object, so a whole benchmark run can execute deterministically in virtual
time.  The virtual clock doubles as a scheduler: periodic tasks registered
on it (metric pollers) fire synchronously, at their exact due times, while
some other component sleeps.  The real clock offers the same interface
backed by ``time`` and daemon threads.
"""

from __future__ import annotations

import itertools
import threading
import time
from typing import Callable

NS_PER_S = 1_000_000_000


class TaskHandle:
    """Cancellation handle for a periodic task."""

    def __init__(self, cancel: Callable[[], None]):
        self._cancel = cancel
        self.cancelled = False

    def cancel(self) -> None:
        if not self.cancelled:
            self.cancelled = True
            self._cancel()


class RealClock:
    """Wall-clock time; periodic tasks run on daemon threads."""

    def __init__(self):
        self._origin = time.monotonic_ns()

    def now_ns(self) -> int:
        return time.monotonic_ns() - self._origin

    def sleep(self, seconds: float) -> None:
        if seconds > 0:
            time.sleep(seconds)

    def schedule_every(self, period_s: float, fn: Callable[[], None]) -> TaskHandle:
        stop = threading.Event()

        def loop():
            next_due = time.monotonic() + period_s
            while not stop.wait(max(0.0, next_due - time.monotonic())):
                fn()
                next_due += period_s

        thread = threading.Thread(target=loop, daemon=True)
        thread.start()
        return TaskHandle(stop.set)


class VirtualClock:
    """Deterministic clock: time advances only through sleep().

    sleep() fires every periodic task whose due time falls inside the
    advanced window, in due-time order (registration order breaks ties),
    with now_ns() set to the task's due time during its callback.
    Callbacks must not sleep on the clock themselves.
    """

    def __init__(self, start_ns: int = 0):
        self._now_ns = start_ns
        self._tasks: list[dict] = []
        self._seq = itertools.count()
        self._sleeping = False

    def now_ns(self) -> int:
        return self._now_ns

    def sleep(self, seconds: float) -> None:
        if seconds < 0:
            raise ValueError("cannot sleep a negative duration")
        if self._sleeping:
            raise RuntimeError("re-entrant sleep on a virtual clock")
        target = self._now_ns + round(seconds * NS_PER_S)
        self._sleeping = True
        try:
            while True:
                due = [t for t in self._tasks if not t["cancelled"] and t["next_ns"] <= target]
                if not due:
                    break
                task = min(due, key=lambda t: (t["next_ns"], t["seq"]))
                self._now_ns = task["next_ns"]
                task["next_ns"] += task["period_ns"]
                task["fn"]()
            self._now_ns = target
        finally:
            self._sleeping = False

    def schedule_every(self, period_s: float, fn: Callable[[], None]) -> TaskHandle:
        if period_s <= 0:
            raise ValueError("period must be positive")
        task = {
            "period_ns": round(period_s * NS_PER_S),
            "next_ns": self._now_ns + round(period_s * NS_PER_S),
            "fn": fn,
            "seq": next(self._seq),
            "cancelled": False,
        }
        self._tasks.append(task)

        def cancel():
            task["cancelled"] = True

        return TaskHandle(cancel)


Clock = RealClock | VirtualClock
