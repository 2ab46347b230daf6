"""Discrete-event core shared by every engine component.

Time is an integer count of nanoseconds so that timelines compare exactly.
:class:`Simulator` runs on a virtual clock; :class:`RealTimeSimulator` keeps
the same scheduling interface but paces events against the wall clock and
accepts callbacks posted from other threads (socket readers).
"""
from __future__ import annotations

import heapq
import itertools
import queue
import threading
import time
from typing import Any, Callable

NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000


def ms_to_ns(ms: float) -> int:
    return int(round(ms * NS_PER_MS))


def ns_to_ms(ns: int) -> float:
    return ns / NS_PER_MS


def transfer_ns(nbytes: int, rate_bytes_per_s: int) -> int:
    """Time to push ``nbytes`` through a ``rate`` bytes/s server, rounded up."""
    return -(-nbytes * NS_PER_S // rate_bytes_per_s)


class Timer:
    __slots__ = ("when", "fn", "args", "cancelled")

    def __init__(self, when: int, fn: Callable, args: tuple):
        self.when = when
        self.fn = fn
        self.args = args
        self.cancelled = False

    def cancel(self) -> None:
        self.cancelled = True


class Simulator:
    """Single-threaded event heap ordered by (time, insertion order)."""

    realtime = False

    def __init__(self):
        self.now = 0
        self._heap: list[tuple[int, int, Timer]] = []
        self._seq = itertools.count()
        self.events_run = 0

    def schedule(self, delay: int, fn: Callable, *args: Any) -> Timer:
        if delay < 0:
            raise ValueError(f"negative delay {delay}")
        return self.at(self.now + delay, fn, *args)

    def at(self, when: int, fn: Callable, *args: Any) -> Timer:
        if when < self.now:
            raise ValueError(f"cannot schedule in the past ({when} < {self.now})")
        timer = Timer(int(when), fn, args)
        heapq.heappush(self._heap, (timer.when, next(self._seq), timer))
        return timer

    def call_threadsafe(self, fn: Callable, *args: Any) -> None:
        self.schedule(0, fn, *args)

    def peek(self) -> int | None:
        while self._heap and self._heap[0][2].cancelled:
            heapq.heappop(self._heap)
        return self._heap[0][0] if self._heap else None

    def step(self) -> bool:
        while self._heap:
            when, _, timer = heapq.heappop(self._heap)
            if timer.cancelled:
                continue
            self.now = when
            self.events_run += 1
            timer.fn(*timer.args)
            return True
        return False

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> None:
        """Process events until the heap drains, ``until`` is reached or ``stop()``."""
        while True:
            if stop is not None and stop():
                return
            nxt = self.peek()
            if nxt is None:
                return
            if until is not None and nxt > until:
                self.now = max(self.now, until)
                return
            self.step()


class RealTimeSimulator(Simulator):
    """Wall-clock paced event loop.

    ``now`` tracks elapsed wall time.  Other threads hand work to the loop
    with :meth:`call_threadsafe`; :meth:`hold`/:meth:`release` count work in
    flight outside the heap so :meth:`run` does not exit while a socket
    message is still travelling.
    """

    realtime = True

    def __init__(self, speed: float = 1.0):
        super().__init__()
        self.speed = speed
        self._t0 = time.monotonic()
        self._inbox: queue.Queue = queue.Queue()
        self._outstanding = 0
        self._lock = threading.Lock()

    def _wall_ns(self) -> int:
        return int((time.monotonic() - self._t0) * NS_PER_S * self.speed)

    def call_threadsafe(self, fn: Callable, *args: Any) -> None:
        self._inbox.put((fn, args))

    def hold(self) -> None:
        with self._lock:
            self._outstanding += 1

    def release(self) -> None:
        with self._lock:
            self._outstanding -= 1

    def _drain_inbox(self, timeout: float | None) -> None:
        try:
            fn, args = self._inbox.get(timeout=timeout)
        except queue.Empty:
            return
        self.now = max(self.now, self._wall_ns())
        fn(*args)
        while True:
            try:
                fn, args = self._inbox.get_nowait()
            except queue.Empty:
                return
            fn(*args)

    def run(self, until: int | None = None, stop: Callable[[], bool] | None = None) -> None:
        while True:
            if stop is not None and stop():
                return
            nxt = self.peek()
            with self._lock:
                idle = self._outstanding == 0
            if nxt is None and idle and self._inbox.empty():
                return
            if until is not None and self._wall_ns() >= until:
                return
            wall = self._wall_ns()
            if nxt is not None and nxt <= wall:
                when, _, timer = heapq.heappop(self._heap)
                self.now = max(self.now, when)
                self.events_run += 1
                timer.fn(*timer.args)
                continue
            wait = None if nxt is None else (nxt - wall) / NS_PER_S / self.speed
            self._drain_inbox(0.05 if wait is None else min(wait, 0.05))


class Pending:
    """Minimal single-assignment result holder for callback-style operations."""

    __slots__ = ("_done", "_value", "_error", "_callbacks")

    def __init__(self):
        self._done = False
        self._value = None
        self._error: BaseException | None = None
        self._callbacks: list[Callable[["Pending"], None]] = []

    @property
    def done(self) -> bool:
        return self._done

    def set_result(self, value: Any = None) -> None:
        if self._done:
            return
        self._done, self._value = True, value
        self._fire()

    def set_error(self, error: BaseException) -> None:
        if self._done:
            return
        self._done, self._error = True, error
        self._fire()

    def _fire(self) -> None:
        callbacks, self._callbacks = self._callbacks, []
        for cb in callbacks:
            cb(self)

    def add_callback(self, cb: Callable[["Pending"], None]) -> None:
        if self._done:
            cb(self)
        else:
            self._callbacks.append(cb)

    def result(self) -> Any:
        if not self._done:
            raise RuntimeError("operation still pending")
        if self._error is not None:
            raise self._error
        return self._value

    def error(self) -> BaseException | None:
        return self._error
