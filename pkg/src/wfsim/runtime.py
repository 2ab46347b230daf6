"""Emulated function executor and per-node container pool.

Function bodies are synthetic: gather inputs, sleep ``compute_millis`` and
emit deterministic pseudo-random output bytes.  Containers are modeled as a
fixed number of slots per node with per-function warm binding.
"""
from __future__ import annotations

import enum
import hashlib
from collections import deque
from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np

from .dstore.types import DataId
from .simcore import NS_PER_S, Pending, Simulator, ms_to_ns
from .trace import ExecutionTrace
from .workflow import FunctionDef


class SlotState(enum.Enum):
    COLD = "Cold"
    WARMING = "Warming"
    WARM = "Warm"
    BUSY = "Busy"


@dataclass
class ContainerSlot:
    node: int
    index: int
    state: SlotState = SlotState.COLD
    function: str | None = None
    holder: tuple[str, str] | None = None  # (execution, function)
    warm_until: int = 0
    last_used: int = 0


@dataclass
class _Request:
    function: str
    execution: str
    coldstart_ns: int
    pending: Pending


class ContainerPool:
    """Fixed-size slot pool of one node.

    ``acquire`` prefers, in order: a warm slot bound to the function, a cold
    or expired slot (paying the cold start), the least recently used idle
    warm slot of another function (re-imaged, paying the cold start).  If
    every slot is busy or warming the request waits in FIFO order.

    A holder blocked on missing inputs keeps its slot while nobody else
    needs one.  Once a request is queued, blocked holders give their slots
    up, oldest first; without this a pool full of prewarmed functions
    waiting on queued producers would never make progress.
    """

    def __init__(
        self,
        sim: Simulator,
        node: int,
        cap: int = 8,
        lifetime_ns: int = 600 * NS_PER_S,
        trace: ExecutionTrace | None = None,
    ):
        if cap < 1:
            raise ValueError("pool cap must be >= 1")
        self.sim = sim
        self.node = node
        self.cap = cap
        self.lifetime_ns = lifetime_ns
        self.trace = trace if trace is not None else ExecutionTrace()
        self.slots = [ContainerSlot(node, i) for i in range(cap)]
        self.queue: deque[_Request] = deque()
        self.peak_busy = 0
        # slot index -> callback that makes a blocked holder hand the slot back
        self.yieldable: dict[int, Callable[[], None]] = {}

    def _warm(self, slot: ContainerSlot) -> bool:
        return slot.state == SlotState.WARM and self.sim.now < slot.warm_until

    def _pick(self, function: str) -> tuple[ContainerSlot, bool] | None:
        """Return (slot, needs_coldstart) or ``None`` when nothing is free."""
        for slot in self.slots:
            if self._warm(slot) and slot.function == function:
                return slot, False
        for slot in self.slots:
            if slot.state == SlotState.COLD or (slot.state == SlotState.WARM and not self._warm(slot)):
                return slot, True
        idle = [s for s in self.slots if s.state == SlotState.WARM]
        if idle:
            return min(idle, key=lambda s: (s.last_used, s.index)), True
        return None

    def acquire(self, function: str, execution: str, coldstart_ns: int) -> Pending:
        """Resolve to a Busy :class:`ContainerSlot` for ``(execution, function)``."""
        req = _Request(function, execution, coldstart_ns, Pending())
        if self.queue or not self._grant(req):
            self.queue.append(req)
            self.trace.record(self.sim.now, self.node, "PoolQueued", execution, function,
                              depth=len(self.queue))
            self._reclaim()
        return req.pending

    def offer_yield(self, slot: ContainerSlot, give_back: Callable[[], None]) -> None:
        """Mark ``slot``'s holder as blocked; ``give_back`` must release it when called."""
        self.yieldable[slot.index] = give_back
        self._reclaim()

    def withdraw_yield(self, slot: ContainerSlot) -> None:
        self.yieldable.pop(slot.index, None)

    def _reclaim(self) -> None:
        while self.queue and self.yieldable:
            index = next(iter(self.yieldable))
            self.yieldable.pop(index)()

    def _grant(self, req: _Request) -> bool:
        picked = self._pick(req.function)
        if picked is None:
            return False
        slot, cold = picked
        slot.holder = (req.execution, req.function)
        if cold:
            slot.state = SlotState.WARMING
            slot.function = req.function
            self.trace.record(self.sim.now, self.node, "ContainerWarming", req.execution, req.function,
                              slot=slot.index, ms=req.coldstart_ns / 1e6)
            self.sim.schedule(req.coldstart_ns, self._warmed, slot, req)
        else:
            self._busy(slot, req)
        return True

    def _warmed(self, slot: ContainerSlot, req: _Request) -> None:
        if slot.holder != (req.execution, req.function):  # cancelled while warming
            return
        self.trace.record(self.sim.now, self.node, "ContainerWarm", req.execution, req.function,
                          slot=slot.index)
        self._busy(slot, req)

    def _busy(self, slot: ContainerSlot, req: _Request) -> None:
        slot.state = SlotState.BUSY
        self.peak_busy = max(self.peak_busy, self.busy_count())
        req.pending.set_result(slot)

    def release(self, slot: ContainerSlot) -> None:
        """Return a slot; it stays warm for ``function`` until its lifetime ends."""
        if slot.holder is None:
            return
        self.yieldable.pop(slot.index, None)
        if slot.state == SlotState.WARMING:
            slot.state = SlotState.COLD
            slot.function = None
        else:
            slot.state = SlotState.WARM
            slot.warm_until = self.sim.now + self.lifetime_ns
        slot.holder = None
        slot.last_used = self.sim.now
        self._drain()

    def _drain(self) -> None:
        while self.queue and self._grant(self.queue[0]):
            self.queue.popleft()

    def cancel_execution(self, execution: str) -> None:
        """Forget queued requests of ``execution`` and free any slot it still holds."""
        self.queue = deque(r for r in self.queue if r.execution != execution)
        for slot in self.slots:
            if slot.holder is not None and slot.holder[0] == execution:
                self.release(slot)

    def busy_count(self) -> int:
        return sum(1 for s in self.slots if s.state in (SlotState.BUSY, SlotState.WARMING))


# -- deterministic outputs ------------------------------------------------------


def output_seed(seed: int, function: str, key: str) -> int:
    h = hashlib.blake2b(f"{seed}\x1f{function}\x1f{key}".encode(), digest_size=8)
    return int.from_bytes(h.digest(), "little")


def make_output(seed: int, function: str, key: str, nbytes: int) -> bytes:
    """Pseudo-random bytes fully determined by ``(seed, function, key)``."""
    if nbytes == 0:
        return b""
    return np.random.Generator(np.random.PCG64(output_seed(seed, function, key))).bytes(nbytes)


# -- function bodies -------------------------------------------------------------


class DataPlane(Protocol):
    """What a function body needs from a store backend."""

    def gather(self, node: int, ids, function=None, on_block=None, on_wake=None) -> Pending: ...

    def put(self, node: int, data_id: DataId, buffer: bytes, function=None) -> Pending: ...


@dataclass
class BodyHooks:
    on_block: Callable[[DataId], None] | None = None
    on_wake: Callable[[DataId], None] | None = None
    on_done: Callable[[BaseException | None], None] | None = None


class BodyTask:
    """One running function body; :meth:`cancel` stops it at any phase."""

    def __init__(self, sim, trace, store: DataPlane, slot: ContainerSlot, fn: FunctionDef,
                 execution: str, seed: int, hooks: BodyHooks, pool: ContainerPool | None = None):
        self.sim = sim
        self.trace = trace
        self.store = store
        self.slot: ContainerSlot | None = slot
        self.node = slot.node
        self.pool = pool
        self.waiting = False
        self.fn = fn
        self.execution = execution
        self.seed = seed
        self.hooks = hooks
        self.cancelled = False
        self.finished = False
        self._timer = None

    def start(self) -> None:
        self.trace.record(self.sim.now, self.node, "BodyStarted", self.execution, self.fn.name,
                          slot=self.slot.index)
        ids = [DataId(self.execution, k) for k in self.fn.inputs]
        gathered = self.store.gather(self.node, ids, self.fn.name,
                                     on_block=self._blocked, on_wake=self.hooks.on_wake)
        gathered.add_callback(self._gathered)

    def _blocked(self, data_id: DataId) -> None:
        if self.pool is not None and not self.waiting and self.slot is not None:
            self.waiting = True
            self.pool.offer_yield(self.slot, self._give_back)
        if self.hooks.on_block is not None:
            self.hooks.on_block(data_id)

    def _give_back(self) -> None:
        slot, self.slot = self.slot, None
        self.trace.record(self.sim.now, self.node, "SlotYielded", self.execution, self.fn.name,
                          slot=slot.index)
        self.pool.release(slot)

    def _gathered(self, p: Pending) -> None:
        if self.cancelled:
            return
        self.waiting = False
        if self.slot is not None and self.pool is not None:
            self.pool.withdraw_yield(self.slot)
        if p.error() is not None:
            self._finish(p.error())
            return
        if self.fn.inputs:
            self.trace.record(self.sim.now, self.node, "GatherDone", self.execution, self.fn.name,
                              inputs=len(self.fn.inputs))
        if self.slot is None:
            # gave the slot away while blocked; compute needs one again
            again = self.pool.acquire(self.fn.name, self.execution, ms_to_ns(self.fn.coldstart_millis))
            again.add_callback(self._reacquired)
            return
        self._timer = self.sim.schedule(ms_to_ns(self.fn.compute_millis), self._computed)

    def _reacquired(self, p: Pending) -> None:
        if self.cancelled:
            self.pool.release(p.result())
            return
        self.slot = p.result()
        self.trace.record(self.sim.now, self.node, "SlotReacquired", self.execution, self.fn.name,
                          slot=self.slot.index)
        self._timer = self.sim.schedule(ms_to_ns(self.fn.compute_millis), self._computed)

    def _computed(self) -> None:
        if self.cancelled:
            return
        outs = self.fn.outputs
        if not outs:
            self._finish(None)
            return
        remaining = [len(outs)]

        def stored(p: Pending) -> None:
            if self.cancelled or self.finished:
                return
            if p.error() is not None:
                self._finish(p.error())
                return
            remaining[0] -= 1
            if remaining[0] == 0:
                self._finish(None)

        for key in outs:
            buf = make_output(self.seed, self.fn.name, key, self.fn.output_bytes)
            try:
                done = self.store.put(self.node, DataId(self.execution, key), buf, self.fn.name)
            except Exception as exc:  # DuplicateIdError, StoreFull
                self._finish(exc)
                return
            done.add_callback(stored)

    def _finish(self, error: BaseException | None) -> None:
        if self.finished:
            return
        self.finished = True
        if error is None:
            self.trace.record(self.sim.now, self.node, "BodyCompleted", self.execution, self.fn.name)
        else:
            self.trace.record(self.sim.now, self.node, "BodyFailed", self.execution, self.fn.name,
                              error=f"{type(error).__name__}: {error}")
        if self.hooks.on_done is not None:
            self.hooks.on_done(error)

    def cancel(self) -> None:
        if self.finished or self.cancelled:
            return
        self.cancelled = True
        if self._timer is not None:
            self._timer.cancel()


def execute_body(sim, trace, store: DataPlane, slot: ContainerSlot, fn: FunctionDef,
                 execution: str, seed: int, hooks: BodyHooks, pool: ContainerPool | None = None) -> BodyTask:
    """Start ``fn`` in ``slot``: gather inputs, compute, put outputs, then ``hooks.on_done``.

    With ``pool`` given, the body hands its slot back while blocked if other
    requests are waiting, and re-acquires one once its inputs are in.
    """
    task = BodyTask(sim, trace, store, slot, fn, execution, seed, hooks, pool)
    task.start()
    return task


__all__ = [
    "BodyHooks", "BodyTask", "ContainerPool", "ContainerSlot", "DataPlane", "SlotState",
    "execute_body", "make_output", "output_seed",
]
