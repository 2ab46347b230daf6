"""Per-node local stores and the receiver-driven retrieval protocol.

A get on node ``n``:

1. serves from ``n``'s local store when the id is there;
2. otherwise joins an in-flight retrieval of the same id on ``n`` or starts
   one by sending QueryMeta to the directory;
3. on MetaPending the readers are marked blocked; on MetaReply they wake;
4. the local store then pulls the buffer straight from the chosen source
   (FetchData -> DataChunk stream), installs the replica, registers the new
   location and serves every reader.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable

from ..simcore import Pending, Simulator
from ..trace import ExecutionTrace
from ..transport import MASTER, Envelope, Fabric, Kind, NodeDown, decode_chunk
from .directory import DirectoryService
from .types import (
    DataId,
    DuplicateIdError,
    ExecutionAborted,
    GetTimeout,
    LocalStoreEntry,
    SourceGone,
    StoreFull,
    digest,
)

Hook = Callable[[], None]


class LocalStore:
    def __init__(self, node: int, capacity_bytes: int | None = None):
        self.node = node
        self.capacity_bytes = capacity_bytes
        self.entries: dict[DataId, LocalStoreEntry] = {}
        self.used = 0
        self.reserved = 0  # puts still copying in

    def reserve(self, nbytes: int) -> None:
        if self.capacity_bytes is not None and self.used + self.reserved + nbytes > self.capacity_bytes:
            raise StoreFull(f"node {self.node} cannot hold {nbytes} more bytes")
        self.reserved += nbytes

    def install(self, entry: LocalStoreEntry) -> None:
        if entry.id in self.entries:
            return
        if self.capacity_bytes is not None and self.used + self.reserved + entry.size > self.capacity_bytes:
            raise StoreFull(f"node {self.node}: {self.used}+{entry.size} > {self.capacity_bytes}")
        self.entries[entry.id] = entry
        self.used += entry.size

    def lookup(self, data_id: DataId) -> LocalStoreEntry | None:
        entry = self.entries.get(data_id)
        return entry if entry is not None and entry.complete else None

    def drop_execution(self, execution: str) -> None:
        for d in [d for d in self.entries if d.execution == execution]:
            self.used -= self.entries.pop(d).size

    def __contains__(self, data_id: DataId) -> bool:
        return self.lookup(data_id) is not None


@dataclass
class _Reader:
    pending: Pending
    function: str | None
    on_block: Hook | None = None
    on_wake: Hook | None = None
    blocked: bool = False


@dataclass
class _Retrieval:
    id: DataId
    readers: list[_Reader] = field(default_factory=list)
    phase: str = "query"  # query | fetch
    blocked: bool = False
    source: int | None = None
    size: int = 0
    parts: bytearray | None = None
    retries: int = 0
    timer: object = None


class StoreAgent:
    """Node-resident half of the store: local data plus the client protocol."""

    def __init__(self, cluster: "DStore", node: int):
        self.cluster = cluster
        self.node = node
        self.sim = cluster.sim
        self.fabric = cluster.fabric
        self.trace = cluster.trace
        self.local = LocalStore(node, cluster.capacity_bytes)
        self._inflight: dict[DataId, _Retrieval] = {}
        self.fabric.attach(node, self.handle, kinds=(
            Kind.META_REPLY, Kind.META_PENDING, Kind.META_ABORT,
            Kind.FETCH, Kind.FETCH_FAILED, Kind.CHUNK,
        ))

    # -- put -------------------------------------------------------------

    def put(self, data_id: DataId, buffer: bytes, function: str | None = None) -> Pending:
        """Copy ``buffer`` into the local store and publish its metadata.

        The returned pending resolves once the copy is done (the container
        may then be released); the directory registration completes
        asynchronously.
        """
        cluster = self.cluster
        if data_id in cluster.put_ids:
            raise DuplicateIdError(str(data_id))
        buffer = bytes(buffer)
        self.local.reserve(len(buffer))
        cluster.put_ids.add(data_id)
        if cluster.hash_data:
            cluster.digests[data_id] = digest(buffer)
        done = Pending()
        copy_ns = cluster.memcpy_ns(len(buffer))
        self.trace.record(self.sim.now, self.node, "MemCopy", data_id.execution, function,
                          key=data_id.key, bytes=len(buffer), ns=copy_ns)
        self.sim.schedule(copy_ns, self._finish_put, data_id, buffer, function, done)
        return done

    def _finish_put(self, data_id: DataId, buffer: bytes, function, done: Pending) -> None:
        self.local.reserved -= len(buffer)
        if data_id not in self.cluster.put_ids:  # execution dropped meanwhile
            done.set_error(ExecutionAborted(str(data_id)))
            return
        try:
            self.local.install(LocalStoreEntry(data_id, buffer))
        except StoreFull as exc:
            done.set_error(exc)
            return
        self.trace.record(self.sim.now, self.node, "Put", data_id.execution, function,
                          key=data_id.key, bytes=len(buffer),
                          digest=self.cluster.digests.get(data_id))
        self._register(data_id, len(buffer))
        done.set_result(None)

    def _register(self, data_id: DataId, size: int) -> None:
        self.fabric.send(Envelope.control(
            self.node, self.cluster.directory_node, Kind.REGISTER_META, data_id.execution,
            execution=data_id.execution, key=data_id.key, size=size, node=self.node,
        ))

    # -- get -------------------------------------------------------------

    def get(
        self,
        data_id: DataId,
        function: str | None = None,
        on_block: Hook | None = None,
        on_wake: Hook | None = None,
    ) -> Pending:
        pending = Pending()
        reader = _Reader(pending, function, on_block, on_wake)
        self.trace.record(self.sim.now, self.node, "GetIssued", data_id.execution, function, key=data_id.key)
        if self.local.lookup(data_id) is not None:
            self._serve([reader], data_id, local=True)
            return pending
        r = self._inflight.get(data_id)
        if r is not None:
            r.readers.append(reader)
            if r.blocked:
                self._block(reader, data_id)
            return pending
        r = self._inflight[data_id] = _Retrieval(data_id, [reader])
        timeout = self.cluster.get_timeout_ns
        if timeout is not None:
            r.timer = self.sim.schedule(timeout, self._timeout, data_id)
        self._query(r)
        return pending

    def _query(self, r: _Retrieval) -> None:
        r.phase = "query"
        self.trace.record(self.sim.now, self.node, "MetaQuery", r.id.execution, None, key=r.id.key)
        self.fabric.send(Envelope.control(
            self.node, self.cluster.directory_node, Kind.QUERY_META, r.id.execution,
            execution=r.id.execution, key=r.id.key,
        ))

    def _block(self, reader: _Reader, data_id: DataId) -> None:
        reader.blocked = True
        self.trace.record(self.sim.now, self.node, "Block", data_id.execution, reader.function, key=data_id.key)
        if reader.on_block is not None:
            reader.on_block()

    def _serve(self, readers: Iterable[_Reader], data_id: DataId, local: bool) -> None:
        entry = self.local.lookup(data_id)
        copy_ns = self.cluster.memcpy_ns(entry.size)
        for reader in readers:
            self.sim.schedule(copy_ns, self._deliver, reader, data_id, entry, local)

    def _deliver(self, reader: _Reader, data_id: DataId, entry: LocalStoreEntry, local: bool) -> None:
        if reader.pending.done:
            return
        detail = {"key": data_id.key, "bytes": entry.size, "local": local}
        if self.cluster.check_reads:
            detail["digest"] = digest(entry.buffer)
        self.trace.record(self.sim.now, self.node, "GetServed", data_id.execution, reader.function, **detail)
        reader.pending.set_result(entry.buffer)

    def _fail(self, data_id: DataId, exc: BaseException) -> None:
        r = self._inflight.pop(data_id, None)
        if r is None:
            return
        if r.timer is not None:
            r.timer.cancel()
        for reader in r.readers:
            reader.pending.set_error(exc)

    def _timeout(self, data_id: DataId) -> None:
        self.trace.record(self.sim.now, self.node, "GetTimeout", data_id.execution, None, key=data_id.key)
        self._fail(data_id, GetTimeout(str(data_id)))

    # -- protocol --------------------------------------------------------

    def handle(self, env: Envelope) -> None:
        if env.kind == Kind.CHUNK:
            self._on_chunk(env)
            return
        f = env.fields()
        data_id = DataId(f["execution"], f["key"])
        if env.kind == Kind.FETCH:
            self._serve_fetch(data_id, env.src)
            return
        r = self._inflight.get(data_id)
        if r is None:
            return
        if env.kind == Kind.META_PENDING:
            if r.phase == "query" and not r.blocked:
                r.blocked = True
                for reader in r.readers:
                    if not reader.blocked:
                        self._block(reader, data_id)
        elif env.kind == Kind.META_REPLY:
            self._on_reply(r, f)
        elif env.kind == Kind.META_ABORT:
            exc = GetTimeout if f.get("reason") == "QueryTimeout" else ExecutionAborted
            self._fail(data_id, exc(str(data_id)))
        elif env.kind == Kind.FETCH_FAILED:
            self._retry(r)

    def _on_reply(self, r: _Retrieval, f: dict) -> None:
        if r.phase != "query":
            return
        if r.blocked:
            r.blocked = False
            for reader in r.readers:
                if reader.blocked:
                    reader.blocked = False
                    self.trace.record(self.sim.now, self.node, "Wake", r.id.execution, reader.function, key=r.id.key)
                    if reader.on_wake is not None:
                        reader.on_wake()
        if self.local.lookup(r.id) is not None:
            self._complete(r, local=True)
            return
        r.phase = "fetch"
        r.source = f["source"]
        r.size = f["size"]
        r.parts = bytearray(r.size)
        self.trace.record(self.sim.now, self.node, "FetchRequest", r.id.execution, None,
                          key=r.id.key, source=r.source)
        try:
            self.fabric.send(Envelope.control(
                self.node, r.source, Kind.FETCH, r.id.execution,
                execution=r.id.execution, key=r.id.key,
            ))
        except NodeDown:
            self._retry(r)

    def _serve_fetch(self, data_id: DataId, requester: int) -> None:
        entry = self.local.lookup(data_id)
        if entry is None:
            self.fabric.send(Envelope.control(
                self.node, requester, Kind.FETCH_FAILED, data_id.execution,
                execution=data_id.execution, key=data_id.key,
            ))
            return
        dest = self.cluster.agents.get(requester)

        def source_gone(exc: Exception) -> None:
            if dest is not None:
                dest._source_gone(data_id)

        try:
            self.fabric.stream(self.node, requester, data_id.execution, data_id.wire(), entry.buffer,
                               on_abort=source_gone)
        except NodeDown:
            source_gone(None)

    def _source_gone(self, data_id: DataId) -> None:
        r = self._inflight.get(data_id)
        if r is not None and r.phase == "fetch":
            self._retry(r)

    def _retry(self, r: _Retrieval) -> None:
        r.retries += 1
        self.trace.record(self.sim.now, self.node, "FetchRetry", r.id.execution, None,
                          key=r.id.key, attempt=r.retries)
        if r.retries > self.cluster.max_fetch_retries:
            self._fail(r.id, ExecutionAborted(f"{r.id}: source unavailable"))
            return
        r.parts = None
        self._query(r)

    def _on_chunk(self, env: Envelope) -> None:
        wire_id, offset, data, last = decode_chunk(env.payload)
        data_id = DataId.from_wire(wire_id)
        r = self._inflight.get(data_id)
        if r is None or r.phase != "fetch" or r.parts is None:
            return
        r.parts[offset:offset + len(data)] = data
        if not last:
            return
        try:
            self.local.install(LocalStoreEntry(data_id, bytes(r.parts)))
        except StoreFull as exc:
            self._fail(data_id, exc)
            return
        self.trace.record(self.sim.now, self.node, "ReplicaInstalled", data_id.execution, None,
                          key=data_id.key, source=env.src, bytes=r.size)
        self._register(data_id, r.size)
        self._complete(r, local=False)

    def _complete(self, r: _Retrieval, local: bool) -> None:
        self._inflight.pop(r.id, None)
        if r.timer is not None:
            r.timer.cancel()
        self._serve(r.readers, r.id, local=local)

    # -- lifecycle -------------------------------------------------------

    def drop_execution(self, execution: str) -> None:
        self.local.drop_execution(execution)
        for d in [d for d in self._inflight if d.execution == execution]:
            self._fail(d, ExecutionAborted(str(d)))


class DStore:
    """The whole distributed store: one agent per worker plus the directory.

    Args:
        sim, fabric: shared event loop and fabric.
        nodes: worker node ids.
        metadata_write_ns: directory write cost per registration.
        memcpy_ns_per_byte: container <-> local store copy cost.
        get_timeout_ns: budget for a get (and for directory parking).
        capacity_bytes: per-node local store capacity, ``None`` for unbounded.
        hash_data: record a digest for every put.
        check_reads: record a digest for every served get.
    """

    def __init__(
        self,
        sim: Simulator,
        fabric: Fabric,
        nodes: Iterable[int],
        *,
        metadata_write_ns: int = 150_000,
        memcpy_ns_per_byte: float = 0.0,
        get_timeout_ns: int | None = None,
        capacity_bytes: int | None = None,
        max_fetch_retries: int = 3,
        hash_data: bool = True,
        check_reads: bool = False,
        directory_node: int = MASTER,
        trace: ExecutionTrace | None = None,
    ):
        self.sim = sim
        self.fabric = fabric
        self.trace = trace if trace is not None else fabric.trace
        self.memcpy_ns_per_byte = memcpy_ns_per_byte
        self.get_timeout_ns = get_timeout_ns
        self.capacity_bytes = capacity_bytes
        self.max_fetch_retries = max_fetch_retries
        self.hash_data = hash_data
        self.check_reads = check_reads
        self.directory_node = directory_node
        self.put_ids: set[DataId] = set()
        self.digests: dict[DataId, str] = {}
        self.service = DirectoryService(
            sim, fabric, write_cost_ns=metadata_write_ns, query_timeout_ns=get_timeout_ns,
            trace=self.trace, node=directory_node,
        )
        self.agents: dict[int, StoreAgent] = {}
        for node in nodes:
            self.agents[node] = StoreAgent(self, node)

    @property
    def directory(self):
        return self.service.directory

    def memcpy_ns(self, nbytes: int) -> int:
        return int(round(nbytes * self.memcpy_ns_per_byte))

    def put(self, node: int, data_id: DataId, buffer: bytes, function: str | None = None) -> Pending:
        return self.agents[node].put(data_id, buffer, function)

    def get(self, node: int, data_id: DataId, function: str | None = None, **hooks) -> Pending:
        return self.agents[node].get(data_id, function, **hooks)

    def gather(
        self,
        node: int,
        ids: Iterable[DataId],
        function: str | None = None,
        on_block: Callable[[DataId], None] | None = None,
        on_wake: Callable[[DataId], None] | None = None,
    ) -> Pending:
        """Fine-grained retrieval: one independent get per input.

        Each input unblocks and transfers as soon as its own producer
        publishes.  Resolves to ``{id: bytes}`` once all arrive, or with the
        first error.
        """
        ids = list(dict.fromkeys(ids))
        result = Pending()
        got: dict[DataId, bytes] = {}
        if not ids:
            result.set_result(got)
            return result
        agent = self.agents[node]

        def arrived(data_id: DataId, p: Pending) -> None:
            if result.done:
                return
            if p.error() is not None:
                result.set_error(p.error())
                return
            got[data_id] = p.result()
            if len(got) == len(ids):
                result.set_result({d: got[d] for d in ids})

        for data_id in ids:
            p = agent.get(
                data_id, function,
                on_block=None if on_block is None else (lambda d=data_id: on_block(d)),
                on_wake=None if on_wake is None else (lambda d=data_id: on_wake(d)),
            )
            p.add_callback(lambda p, d=data_id: arrived(d, p))
        return result

    def drop_execution(self, execution: str) -> None:
        """Delete all data and metadata of ``execution`` and fail its readers."""
        for d in [d for d in self.put_ids if d.execution == execution]:
            self.put_ids.discard(d)
            self.digests.pop(d, None)
        for agent in self.agents.values():
            agent.drop_execution(execution)
        self.service.drop_execution(execution)
        self.fabric.cancel_execution(execution)
        self.trace.record(self.sim.now, None, "ExecutionDropped", execution)

    def remove_node(self, node: int) -> None:
        self.directory.remove_node(node)
        agent = self.agents.get(node)
        if agent is not None:
            for d in list(agent._inflight):
                agent._fail(d, ExecutionAborted(f"node {node} failed"))
            agent.local.entries.clear()
            agent.local.used = 0

    def holders(self, data_id: DataId) -> list[int]:
        return [n for n, a in self.agents.items() if data_id in a.local]
