"""Centralized controlflow baseline: master-resident scheduler and store.

Every function output is streamed to the master and every input is read
back from it, so each cross-function datum makes two network trips.  The
master invokes a function only after all its predecessors reported
completion, which guarantees its inputs exist when it reads them; the
store therefore never blocks and treats a missing id as a bug.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

from .dstore.types import DataId, DuplicateIdError, ExecutionAborted, MissingData, digest
from .partition import Placement
from .simcore import Pending, Simulator
from .trace import ExecutionTrace
from .transport import MASTER, Envelope, Fabric, Kind, NodeDown, decode_chunk
from .workflow import DagView, WorkflowSpec, build_dag_view


@dataclass
class CentralStoreEntry:
    id: DataId
    buffer: bytes


class CentralStore:
    """Master-hosted write-once store plus the worker-side client.

    Implements the same ``put`` / ``gather`` surface as
    :class:`wfsim.dstore.DStore` so function bodies do not care which
    backend they talk to.
    """

    def __init__(
        self,
        sim: Simulator,
        fabric: Fabric,
        nodes: Iterable[int],
        *,
        trace: ExecutionTrace | None = None,
        hash_data: bool = True,
        check_reads: bool = False,
    ):
        self.sim = sim
        self.fabric = fabric
        self.trace = trace if trace is not None else fabric.trace
        self.hash_data = hash_data
        self.check_reads = check_reads
        self.entries: dict[DataId, CentralStoreEntry] = {}
        self.digests: dict[DataId, str] = {}
        self.put_ids: set[DataId] = set()
        self.missing_reads = 0
        self._incoming: dict[DataId, bytearray] = {}
        self._puts: dict[tuple[int, DataId], Pending] = {}
        self._gets: dict[tuple[int, DataId], list[tuple[Pending, str | None]]] = {}
        self._partial: dict[tuple[int, DataId], bytearray] = {}
        fabric.attach(MASTER, self._master, kinds=(Kind.CENTRAL_PUT, Kind.CENTRAL_GET, Kind.CHUNK))
        for node in nodes:
            fabric.attach(node, self._client, kinds=(Kind.CHUNK, Kind.CENTRAL_PUT_ACK, Kind.FETCH_FAILED))

    # -- client side -------------------------------------------------------

    def put(self, node: int, data_id: DataId, buffer: bytes, function: str | None = None) -> Pending:
        if data_id in self.put_ids:
            raise DuplicateIdError(str(data_id))
        buffer = bytes(buffer)
        self.put_ids.add(data_id)
        if self.hash_data:
            self.digests[data_id] = digest(buffer)
        done = Pending()
        self._puts[(node, data_id)] = done
        self.trace.record(self.sim.now, node, "CentralPutStart", data_id.execution, function,
                          key=data_id.key, bytes=len(buffer))
        self.fabric.send(Envelope.control(node, MASTER, Kind.CENTRAL_PUT, data_id.execution,
                                          execution=data_id.execution, key=data_id.key, size=len(buffer)))
        self.fabric.stream(node, MASTER, data_id.execution, data_id.wire(), buffer,
                           on_abort=lambda exc: self._fail_put(node, data_id, exc))
        return done

    def _fail_put(self, node: int, data_id: DataId, exc: Exception) -> None:
        p = self._puts.pop((node, data_id), None)
        if p is not None:
            p.set_error(ExecutionAborted(f"{data_id}: {exc}"))

    def get(self, node: int, data_id: DataId, function: str | None = None) -> Pending:
        pending = Pending()
        self.trace.record(self.sim.now, node, "GetIssued", data_id.execution, function, key=data_id.key)
        self._gets.setdefault((node, data_id), []).append((pending, function))
        self.fabric.send(Envelope.control(node, MASTER, Kind.CENTRAL_GET, data_id.execution,
                                          execution=data_id.execution, key=data_id.key))
        return pending

    def gather(self, node: int, ids, function=None, on_block=None, on_wake=None) -> Pending:
        ids = list(dict.fromkeys(ids))
        result = Pending()
        got: dict[DataId, bytes] = {}
        if not ids:
            result.set_result(got)
            return result

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
            self.get(node, data_id, function).add_callback(lambda p, d=data_id: arrived(d, p))
        return result

    def _client(self, env: Envelope) -> None:
        node = env.dst
        if env.kind == Kind.CHUNK:
            wire_id, offset, data, last = decode_chunk(env.payload)
            data_id = DataId.from_wire(wire_id)
            key = (node, data_id)
            if key not in self._gets:
                return
            buf = self._partial.setdefault(key, bytearray())
            buf[offset:offset + len(data)] = data
            if not last:
                return
            buffer = bytes(self._partial.pop(key))
            for pending, function in self._gets.pop(key, []):
                detail = {"key": data_id.key, "bytes": len(buffer), "local": False}
                if self.check_reads:
                    detail["digest"] = digest(buffer)
                self.trace.record(self.sim.now, node, "GetServed", data_id.execution, function, **detail)
                pending.set_result(buffer)
            return
        f = env.fields()
        data_id = DataId(f["execution"], f["key"])
        if env.kind == Kind.CENTRAL_PUT_ACK:
            p = self._puts.pop((node, data_id), None)
            if p is not None:
                self.trace.record(self.sim.now, node, "Put", data_id.execution, None,
                                  key=data_id.key, digest=self.digests.get(data_id))
                p.set_result(None)
        elif env.kind == Kind.FETCH_FAILED:
            self._partial.pop((node, data_id), None)
            for pending, _ in self._gets.pop((node, data_id), []):
                pending.set_error(MissingData(str(data_id)))

    # -- master side -------------------------------------------------------

    def _master(self, env: Envelope) -> None:
        if env.kind == Kind.CHUNK:
            wire_id, offset, data, last = decode_chunk(env.payload)
            data_id = DataId.from_wire(wire_id)
            if data_id in self.entries:
                return
            buf = self._incoming.setdefault(data_id, bytearray())
            buf[offset:offset + len(data)] = data
            if last:
                del self._incoming[data_id]
                self.entries[data_id] = CentralStoreEntry(data_id, bytes(buf))
                self.trace.record(self.sim.now, MASTER, "CentralStored", data_id.execution, None,
                                  key=data_id.key, bytes=len(buf))
                self._send(env.src, Kind.CENTRAL_PUT_ACK, data_id)
            return
        f = env.fields()
        data_id = DataId(f["execution"], f["key"])
        if env.kind == Kind.CENTRAL_PUT:
            # the header may trail the first chunk on a real socket transport
            if data_id not in self.entries:
                self._incoming.setdefault(data_id, bytearray())
        elif env.kind == Kind.CENTRAL_GET:
            entry = self.entries.get(data_id)
            if entry is None:
                self.missing_reads += 1
                self.trace.record(self.sim.now, MASTER, "MissingData", data_id.execution, None,
                                  key=data_id.key, requester=env.src)
                self._send(env.src, Kind.FETCH_FAILED, data_id)
                return
            try:
                self.fabric.stream(MASTER, env.src, data_id.execution, data_id.wire(), entry.buffer)
            except NodeDown:
                pass

    def _send(self, dst: int, kind: str, data_id: DataId) -> None:
        if dst in self.fabric.down:
            return
        self.fabric.send(Envelope.control(MASTER, dst, kind, data_id.execution,
                                          execution=data_id.execution, key=data_id.key))

    # -- lifecycle ---------------------------------------------------------

    def drop_execution(self, execution: str) -> None:
        for d in [d for d in self.entries if d.execution == execution]:
            del self.entries[d]
        for d in [d for d in self._incoming if d.execution == execution]:
            del self._incoming[d]
        for d in [d for d in self.put_ids if d.execution == execution]:
            self.put_ids.discard(d)
            self.digests.pop(d, None)
        for key in [k for k in self._puts if k[1].execution == execution]:
            self._puts.pop(key).set_error(ExecutionAborted(execution))
        for key in [k for k in self._gets if k[1].execution == execution]:
            self._partial.pop(key, None)
            for pending, _ in self._gets.pop(key):
                pending.set_error(ExecutionAborted(execution))
        self.fabric.cancel_execution(execution)
        self.trace.record(self.sim.now, None, "ExecutionDropped", execution)

    def remove_node(self, node: int) -> None:
        for key in [k for k in self._gets if k[0] == node]:
            self._partial.pop(key, None)
            for pending, _ in self._gets.pop(key):
                pending.set_error(ExecutionAborted(f"node {node} failed"))

    def holds(self, data_id: DataId) -> bool:
        return data_id in self.entries


@dataclass
class _CentralExec:
    workflow: str
    done: set = field(default_factory=set)
    invoked: set = field(default_factory=set)


class CentralScheduler:
    """Master-resident controlflow loop that tracks every function's state."""

    def __init__(self, sim: Simulator, fabric: Fabric, trace: ExecutionTrace | None = None):
        self.sim = sim
        self.fabric = fabric
        self.trace = trace if trace is not None else fabric.trace
        self.specs: dict[str, WorkflowSpec] = {}
        self.views: dict[str, DagView] = {}
        self.placements: dict[str, Placement] = {}
        self.execs: dict[str, _CentralExec] = {}
        fabric.attach(MASTER, self.handle, kinds=(Kind.COMPLETED,))

    def register(self, spec: WorkflowSpec, placement: Placement, view: DagView | None = None) -> None:
        self.specs[spec.name] = spec
        self.views[spec.name] = view or build_dag_view(spec)
        self.placements[spec.name] = placement

    def on_workflow_arrival(self, workflow: str, execution: str) -> list[str]:
        ex = self.execs[execution] = _CentralExec(workflow)
        spec = self.specs[workflow]
        for f in spec.entry_points:
            self._invoke(ex, execution, f)
        return list(spec.entry_points)

    def _invoke(self, ex: _CentralExec, execution: str, function: str) -> None:
        if function in ex.invoked:
            return
        ex.invoked.add(function)
        owner = self.placements[ex.workflow].node_of(function)
        self.trace.record(self.sim.now, MASTER, "SendInvokeFunction", execution, function, dst=owner)
        try:
            self.fabric.send(Envelope.control(MASTER, owner, Kind.INVOKE, execution,
                                              execution=execution, function=function))
        except NodeDown:
            pass

    def handle(self, env: Envelope) -> None:
        f = env.fields()
        execution = f["execution"]
        ex = self.execs.get(execution)
        if ex is None:
            return
        done = f["function"]
        ex.done.add(done)
        view = self.views[ex.workflow]
        for succ in view.successors[done]:
            if all(p in ex.done for p in view.predecessors[succ]):
                self._invoke(ex, execution, succ)

    def abort(self, execution: str) -> None:
        self.execs.pop(execution, None)

    finish = abort
