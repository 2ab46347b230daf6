"""Simulated full-mesh cluster fabric.

Control messages are delivered after the link latency and are never shaped.
``DataChunk`` streams pass through up to three rate-limited servers in
order: the sender's egress port, the (src, dst) link port and the receiver's
ingress port.  A server with no configured rate is skipped.  Each server
sends one chunk at a time and round-robins between the flows queued on it,
so concurrent flows into one node share its ingress rate fairly.
"""
from __future__ import annotations

import itertools
import logging
from collections import Counter, deque
from typing import Callable, Iterable

from ..simcore import Simulator, transfer_ns
from ..trace import ExecutionTrace
from .codec import Envelope, Kind, encode_chunk

log = logging.getLogger(__name__)

MASTER = -1
DEFAULT_CHUNK = 64 * 1024


class NodeDown(RuntimeError):
    pass


class Flow:
    """One DataChunk stream from ``src`` to ``dst``."""

    __slots__ = (
        "fid", "src", "dst", "execution", "data_id", "total", "sent", "delivered",
        "on_done", "on_abort", "aborted", "started_at", "finished_at",
    )

    def __init__(self, fid, src, dst, execution, data_id, total, on_done, on_abort, now):
        self.fid = fid
        self.src = src
        self.dst = dst
        self.execution = execution
        self.data_id = data_id
        self.total = total
        self.sent = 0
        self.delivered = 0
        self.on_done = on_done
        self.on_abort = on_abort
        self.aborted = False
        self.started_at = now
        self.finished_at: int | None = None


class _Port:
    __slots__ = ("fabric", "name", "rate", "queues", "rr", "busy", "served_bytes")

    def __init__(self, fabric: "Fabric", name: tuple):
        self.fabric = fabric
        self.name = name
        self.rate: int | None = None
        self.queues: dict[int, deque] = {}
        self.rr: deque = deque()
        self.busy = False
        self.served_bytes = 0

    def push(self, flow: Flow, item) -> None:
        q = self.queues.get(flow.fid)
        if q is None:
            q = self.queues[flow.fid] = deque()
            self.rr.append(flow.fid)
        q.append((flow, item))
        if not self.busy:
            self._serve()

    def _serve(self) -> None:
        while self.rr:
            fid = self.rr.popleft()
            q = self.queues[fid]
            while q and q[0][0].aborted:
                q.popleft()
            if not q:
                del self.queues[fid]
                continue
            flow, item = q.popleft()
            # the served flow rejoins the rotation only after its chunk is
            # done, behind any flow that arrived meanwhile
            self.busy = True
            nbytes = item[2]
            self.fabric.sim.schedule(transfer_ns(max(nbytes, 1), self.rate), self._served, flow, item)
            return
        self.busy = False

    def _served(self, flow: Flow, item) -> None:
        self.busy = False
        q = self.queues.get(flow.fid)
        if q is not None:
            if q:
                self.rr.append(flow.fid)
            else:
                del self.queues[flow.fid]
        if not flow.aborted:
            self.served_bytes += item[2]
            self.fabric._advance(flow, item)
        self._serve()


class Fabric:
    """In-process message bus between node roles.

    Args:
        sim: event loop.
        nodes: worker node ids; :data:`MASTER` is always added.
        latency_ns: one-way latency for every link (control and data).
        chunk_size: DataChunk payload size.
        trace: optional trace sink.
        relay: optional replacement for latency-based control delivery,
            called as ``relay(envelope, deliver)``; used by the socket transport.
    """

    def __init__(
        self,
        sim: Simulator,
        nodes: Iterable[int],
        *,
        latency_ns: int = 0,
        chunk_size: int = DEFAULT_CHUNK,
        trace: ExecutionTrace | None = None,
        relay: Callable[[Envelope, Callable[[Envelope], None]], None] | None = None,
        trace_chunks: bool = False,
    ):
        if chunk_size <= 0:
            raise ValueError("chunk_size must be positive")
        self.sim = sim
        self.nodes = set(nodes) | {MASTER}
        self.latency_ns = latency_ns
        self.link_latency: dict[tuple[int, int], int] = {}
        self.chunk_size = chunk_size
        self.trace = trace if trace is not None else ExecutionTrace()
        self.trace_chunks = trace_chunks
        self.relay = relay
        self.handlers: dict[tuple[int, str | None], Callable[[Envelope], None]] = {}
        self.down: set[int] = set()
        self.ports: dict[tuple, _Port] = {}
        self.flows: dict[int, Flow] = {}
        self._fids = itertools.count(1)
        self.bytes_by_link: Counter = Counter()
        self.messages_by_kind: Counter = Counter()

    # -- wiring ------------------------------------------------------------

    def attach(self, node: int, handler: Callable[[Envelope], None], kinds: Iterable[str] | None = None) -> None:
        """Route envelopes for ``node`` (optionally only the given kinds) to ``handler``."""
        self.nodes.add(node)
        if kinds is None:
            self.handlers[(node, None)] = handler
        else:
            for kind in kinds:
                self.handlers[(node, kind)] = handler

    def latency(self, src: int, dst: int) -> int:
        if src == dst:
            return 0
        return self.link_latency.get((src, dst), self.latency_ns)

    def _port(self, *name) -> _Port:
        port = self.ports.get(name)
        if port is None:
            port = self.ports[name] = _Port(self, name)
        return port

    def set_bandwidth(self, target, bytes_per_sec: float, scope: str = "both") -> None:
        """Throttle a node (``int``) or a directed link (``(src, dst)``).

        A node throttle limits its ingress, egress or both and therefore
        every link incident to it.  Unknown nodes only produce a warning event.
        """
        rate = int(bytes_per_sec)
        if rate <= 0:
            raise ValueError("bandwidth must be positive")
        if isinstance(target, tuple):
            src, dst = target
            if src not in self.nodes or dst not in self.nodes:
                self._warn_unknown(target)
                return
            self._port("link", src, dst).rate = rate
            self.trace.record(self.sim.now, dst, "BandwidthChanged", link=[src, dst], rate=rate)
            return
        if target not in self.nodes:
            self._warn_unknown(target)
            return
        if scope not in ("ingress", "egress", "both"):
            raise ValueError(f"bad scope {scope!r}")
        for direction in ("ingress", "egress"):
            if scope in (direction, "both"):
                self._port(direction, target).rate = rate
        self.trace.record(self.sim.now, target, "BandwidthChanged", scope=scope, rate=rate)

    def set_all_bandwidth(self, bytes_per_sec: float, scope: str = "both") -> None:
        for node in sorted(self.nodes):
            self.set_bandwidth(node, bytes_per_sec, scope)

    def _warn_unknown(self, target) -> None:
        log.warning("set_bandwidth on unknown target %r ignored", target)
        self.trace.record(self.sim.now, None, "Warning", reason="unknown bandwidth target", target=str(target))

    # -- faults --------------------------------------------------------------

    def fail(self, node: int) -> None:
        self.down.add(node)
        self.trace.record(self.sim.now, node, "NodeDown")
        for flow in list(self.flows.values()):
            if node in (flow.src, flow.dst):
                self._abort(flow, NodeDown(f"node {node} failed"))

    def recover(self, node: int) -> None:
        self.down.discard(node)

    def cancel_execution(self, execution: str) -> None:
        for flow in list(self.flows.values()):
            if flow.execution == execution:
                self._abort(flow, None)

    def _abort(self, flow: Flow, error: Exception | None) -> None:
        if flow.aborted:
            return
        flow.aborted = True
        self.flows.pop(flow.fid, None)
        if error is not None and flow.on_abort is not None:
            flow.on_abort(error)

    # -- control messages ------------------------------------------------

    def send(self, env: Envelope) -> None:
        if env.src in self.down:
            raise NodeDown(f"node {env.src} is down")
        self.messages_by_kind[env.kind] += 1
        if self.relay is not None and env.src != env.dst:
            self.relay(env, self._deliver)
        else:
            self.sim.schedule(self.latency(env.src, env.dst), self._deliver, env)

    def _deliver(self, env: Envelope) -> None:
        if env.dst in self.down:
            self.trace.record(self.sim.now, env.dst, "Dropped", env.execution or None, kind=env.kind)
            return
        handler = self.handlers.get((env.dst, env.kind)) or self.handlers.get((env.dst, None))
        if handler is None:
            raise LookupError(f"node {env.dst} has no handler for {env.kind}")
        handler(env)

    # -- data streams ----------------------------------------------------

    def stream(
        self,
        src: int,
        dst: int,
        execution: str,
        data_id: str,
        buffer: bytes,
        *,
        on_done: Callable[[Flow], None] | None = None,
        on_abort: Callable[[Exception], None] | None = None,
    ) -> Flow:
        """Send ``buffer`` as DataChunk envelopes; each chunk reaches ``dst``'s handler."""
        if src in self.down:
            raise NodeDown(f"node {src} is down")
        if dst in self.down:
            raise NodeDown(f"node {dst} is down")
        flow = Flow(next(self._fids), src, dst, execution, data_id, len(buffer), on_done, on_abort, self.sim.now)
        self.flows[flow.fid] = flow
        self.trace.record(self.sim.now, dst, "TransferStart", execution, None,
                          data=data_id, src=src, dst=dst, bytes=len(buffer))
        view = memoryview(buffer)
        size = self.chunk_size
        offsets = range(0, len(buffer), size) if buffer else [0]
        last_off = offsets[-1]
        for off in offsets:
            n = min(size, len(buffer) - off)
            # item: (offset, payload view, nbytes, last, stage index)
            flow.sent += n
            self._advance(flow, (off, view[off:off + n], n, off == last_off, -1))
        return flow

    def _stages(self, flow: Flow) -> list[_Port]:
        stages = []
        for name in (("egress", flow.src), ("link", flow.src, flow.dst), ("ingress", flow.dst)):
            port = self.ports.get(name)
            if port is not None and port.rate is not None:
                stages.append(port)
        return stages

    def _advance(self, flow: Flow, item) -> None:
        off, data, n, last, stage = item
        for port in self._stages(flow):
            rank = _RANK[port.name[0]]
            if rank > stage:
                port.push(flow, (off, data, n, last, rank))
                return
        self.sim.schedule(self.latency(flow.src, flow.dst), self._deliver_chunk, flow, off, data, n, last)

    def _deliver_chunk(self, flow: Flow, off: int, data, n: int, last: bool) -> None:
        if flow.aborted:
            return
        flow.delivered += n
        self.bytes_by_link[(flow.src, flow.dst)] += n
        if self.trace_chunks:
            self.trace.record(self.sim.now, flow.dst, "Chunk", flow.execution, None,
                              data=flow.data_id, src=flow.src, offset=off, bytes=n, last=last)
        env = Envelope(flow.src, flow.dst, Kind.CHUNK, flow.execution,
                       encode_chunk(flow.data_id, off, data, last))
        self.messages_by_kind[Kind.CHUNK] += 1
        if last:
            flow.finished_at = self.sim.now
            self.flows.pop(flow.fid, None)
            self.trace.record(self.sim.now, flow.dst, "TransferDone", flow.execution, None,
                              data=flow.data_id, src=flow.src, dst=flow.dst, bytes=flow.total,
                              started=flow.started_at)
        self._deliver(env)
        if last and flow.on_done is not None:
            flow.on_done(flow)


_RANK = {"egress": 0, "link": 1, "ingress": 2}
