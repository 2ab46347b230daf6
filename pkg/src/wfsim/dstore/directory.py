"""Metadata directory: data id -> size, replica locations, access counters.

:class:`Directory` is the state machine.  It is safe to call from several
threads; callbacks always run outside the internal lock.  Readers that ask
for an unregistered id are parked as :class:`Waiter` objects (no thread is
held) and released by the registration that publishes the id.

:class:`DirectoryService` is the master-hosted role that speaks the
RegisterMeta / QueryMeta protocol over the fabric.
"""
from __future__ import annotations

import threading
from typing import Callable

from ..simcore import Simulator
from ..trace import ExecutionTrace
from ..transport import MASTER, Envelope, Fabric, Kind
from .types import DataId, DataMetadata, ExecutionAborted, MetaView, QueryTimeout

ReplyFn = Callable[[MetaView], None]
ErrorFn = Callable[[BaseException], None]


class Waiter:
    __slots__ = ("id", "reply", "error", "done", "tag")

    def __init__(self, data_id: DataId, reply: ReplyFn, error: ErrorFn | None, tag=None):
        self.id = data_id
        self.reply = reply
        self.error = error
        self.done = False
        self.tag = tag


class Directory:
    def __init__(self):
        self._meta: dict[DataId, DataMetadata] = {}
        self._waiters: dict[DataId, list[Waiter]] = {}
        self._lock = threading.Lock()
        self.wakeups = 0

    # choose-and-increment; caller holds the lock
    def _choose(self, meta: DataMetadata) -> MetaView:
        source = min(meta.locations, key=lambda n: (meta.access_frequency.get(n, 0), n))
        meta.access_frequency[source] = meta.access_frequency.get(source, 0) + 1
        return MetaView(meta.copy(), source)

    def register(self, data_id: DataId, size_bytes: int, node: int) -> int:
        """Record that ``node`` holds a complete copy; wake every parked reader.

        Returns the number of readers woken.
        """
        with self._lock:
            meta = self._meta.get(data_id)
            if meta is None:
                meta = self._meta[data_id] = DataMetadata(data_id, size_bytes)
            if node not in meta.locations:
                meta.locations.append(node)
                meta.access_frequency.setdefault(node, 0)
            waiters = self._waiters.pop(data_id, [])
            ready = []
            for w in waiters:
                if not w.done:
                    w.done = True
                    ready.append((w, self._choose(meta)))
            self.wakeups += len(ready)
        for w, view in ready:
            w.reply(view)
        return len(ready)

    def query(self, data_id: DataId, reply: ReplyFn, error: ErrorFn | None = None, tag=None) -> Waiter | None:
        """Reply at once if ``data_id`` is known, else park and return the waiter."""
        with self._lock:
            meta = self._meta.get(data_id)
            if meta is not None and meta.locations:
                view = self._choose(meta)
                waiter = None
            else:
                waiter = Waiter(data_id, reply, error, tag)
                self._waiters.setdefault(data_id, []).append(waiter)
        if waiter is None:
            reply(view)
        return waiter

    def cancel(self, waiter: Waiter, exc: BaseException | None = None) -> bool:
        with self._lock:
            if waiter.done:
                return False
            waiter.done = True
            lst = self._waiters.get(waiter.id)
            if lst is not None and waiter in lst:
                lst.remove(waiter)
                if not lst:
                    del self._waiters[waiter.id]
        if exc is not None and waiter.error is not None:
            waiter.error(exc)
        return True

    def query_blocking(self, data_id: DataId, timeout: float | None = None) -> MetaView:
        """Thread-blocking query, for callers living on real threads."""
        box: list = []
        ready = threading.Event()

        def done(value):
            box.append(value)
            ready.set()

        waiter = self.query(data_id, done, done)
        if not ready.wait(timeout):
            if waiter is not None and self.cancel(waiter):
                raise QueryTimeout(str(data_id))
            ready.wait()
        value = box[0]
        if isinstance(value, BaseException):
            raise value
        return value

    def lookup(self, data_id: DataId) -> DataMetadata | None:
        with self._lock:
            meta = self._meta.get(data_id)
            return None if meta is None else meta.copy()

    def parked(self, data_id: DataId | None = None) -> int:
        with self._lock:
            if data_id is not None:
                return len(self._waiters.get(data_id, ()))
            return sum(len(v) for v in self._waiters.values())

    def ids(self) -> list[DataId]:
        with self._lock:
            return list(self._meta)

    def drop_execution(self, execution: str) -> int:
        """Forget every record of ``execution`` and abort its parked readers."""
        with self._lock:
            gone = [d for d in self._meta if d.execution == execution]
            for d in gone:
                del self._meta[d]
            aborted = []
            for d in [d for d in self._waiters if d.execution == execution]:
                for w in self._waiters.pop(d):
                    if not w.done:
                        w.done = True
                        aborted.append(w)
        for w in aborted:
            if w.error is not None:
                w.error(ExecutionAborted(f"execution {execution} dropped"))
        return len(gone)

    def remove_node(self, node: int) -> None:
        with self._lock:
            for d in list(self._meta):
                meta = self._meta[d]
                if node in meta.locations:
                    meta.locations.remove(node)
                    meta.access_frequency.pop(node, None)
                    if not meta.locations:
                        del self._meta[d]


class DirectoryService:
    """Master-side protocol handler around a :class:`Directory`."""

    def __init__(
        self,
        sim: Simulator,
        fabric: Fabric,
        *,
        write_cost_ns: int = 150_000,
        query_timeout_ns: int | None = None,
        trace: ExecutionTrace | None = None,
        node: int = MASTER,
    ):
        self.sim = sim
        self.fabric = fabric
        self.node = node
        self.write_cost_ns = write_cost_ns
        self.query_timeout_ns = query_timeout_ns
        self.trace = trace if trace is not None else fabric.trace
        self.directory = Directory()
        self.closed: set[str] = set()
        fabric.attach(node, self.handle, kinds=(Kind.REGISTER_META, Kind.QUERY_META))

    def handle(self, env: Envelope) -> None:
        f = env.fields()
        data_id = DataId(f["execution"], f["key"])
        if data_id.execution in self.closed:
            if env.kind == Kind.QUERY_META and env.src not in self.fabric.down:
                self.fabric.send(Envelope.control(
                    self.node, env.src, Kind.META_ABORT, data_id.execution,
                    execution=data_id.execution, key=data_id.key, reason="ExecutionAborted",
                ))
            return
        if env.kind == Kind.REGISTER_META:
            self.sim.schedule(self.write_cost_ns, self._apply_register, data_id, f["size"], f["node"])
        else:
            self._query(data_id, env.src)

    def _apply_register(self, data_id: DataId, size: int, node: int) -> None:
        if node in self.fabric.down or data_id.execution in self.closed:
            return
        woke = self.directory.register(data_id, size, node)
        self.trace.record(self.sim.now, self.node, "MetaRegister", data_id.execution, None,
                          key=data_id.key, location=node, woke=woke)

    def _reply(self, requester: int, view: MetaView) -> None:
        m = view.meta
        self.fabric.send(Envelope.control(
            self.node, requester, Kind.META_REPLY, m.id.execution,
            execution=m.id.execution, key=m.id.key, size=m.size_bytes,
            locations=m.locations, source=view.source,
        ))

    def _query(self, data_id: DataId, requester: int) -> None:
        timer_box: list = []

        def reply(view: MetaView) -> None:
            if timer_box:
                timer_box[0].cancel()
            self._reply(requester, view)

        def error(exc: BaseException) -> None:
            if timer_box:
                timer_box[0].cancel()
            if requester in self.fabric.down:
                return
            self.fabric.send(Envelope.control(
                self.node, requester, Kind.META_ABORT, data_id.execution,
                execution=data_id.execution, key=data_id.key, reason=type(exc).__name__,
            ))

        waiter = self.directory.query(data_id, reply, error, tag=requester)
        if waiter is None:
            return
        self.trace.record(self.sim.now, self.node, "MetaPark", data_id.execution, None,
                          key=data_id.key, requester=requester)
        self.fabric.send(Envelope.control(
            self.node, requester, Kind.META_PENDING, data_id.execution,
            execution=data_id.execution, key=data_id.key,
        ))
        if self.query_timeout_ns is not None:
            timer_box.append(self.sim.schedule(
                self.query_timeout_ns, self.directory.cancel, waiter, QueryTimeout(str(data_id))
            ))

    def drop_execution(self, execution: str) -> None:
        """Forget ``execution``; later registrations and queries for it are refused."""
        self.closed.add(execution)
        self.directory.drop_execution(execution)
