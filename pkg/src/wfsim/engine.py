"""Engine: wires fabric, store, pools and schedulers into one simulated cluster."""
from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Iterable

from .central import CentralScheduler, CentralStore
from .dstore import DataId, DStore, ExecutionAborted, LocalStoreEntry, digest
from .partition import NodePlan, Placement, compute_node_plans, partition, repartition_and_restart
from .runtime import ContainerPool, make_output
from .scheduler import LocalScheduler, SchedulerPolicy
from .simcore import NS_PER_S, RealTimeSimulator, Simulator, ms_to_ns
from .trace import ExecutionTrace
from .transport import MASTER, Fabric
from .workflow import DagView, WorkflowSpec, build_dag_view

log = logging.getLogger(__name__)

POLICIES = ("dataflow", "controlflow", "cflow")
STORES = ("dstore", "central")


class ConfigError(ValueError):
    pass


class ExecutionTimeout(RuntimeError):
    pass


@dataclass(frozen=True)
class BandwidthSetting:
    """A throttle: ``target`` is a node id, ``(src, dst)``, ``"all"`` or ``"master"``."""

    target: object
    bytes_per_sec: float
    scope: str = "ingress"


@dataclass
class EngineConfig:
    nodes: int = 2
    policy: str = "dataflow"
    store: str | None = None  # defaults to central for cflow, dstore otherwise
    latency_ms: float = 0.0
    metadata_write_us: float = 150.0
    memcpy_ns_per_byte: float = 0.0
    chunk_size: int = 64 * 1024
    bandwidth: list[BandwidthSetting] = field(default_factory=list)
    pool_cap: int = 8
    container_lifetime_s: float = 600.0
    lookahead_depth: int | None = 2
    timeout_s: float = 60.0
    get_timeout_s: float | None = None
    partition: str = "greedy_edge_cut"
    store_capacity_bytes: int | None = None
    max_fetch_retries: int = 3
    hash_data: bool = True
    check_reads: bool = False
    free_on_complete: bool = False
    time_mode: str = "virtual"
    transport: str = "sim"
    realtime_speed: float = 1.0
    trace_chunks: bool = False

    def __post_init__(self):
        if self.store is None:
            self.store = "central" if self.policy == "cflow" else "dstore"
        if self.policy not in POLICIES:
            raise ConfigError(f"policy must be one of {POLICIES}")
        if self.store not in STORES:
            raise ConfigError(f"store must be one of {STORES}")
        if self.policy == "dataflow" and self.store == "central":
            raise ConfigError("the dataflow policy needs the blocking store (dstore)")
        if self.nodes < 1:
            raise ConfigError("need at least one node")
        if self.time_mode not in ("virtual", "real"):
            raise ConfigError("time_mode is virtual or real")
        if self.transport not in ("sim", "socket"):
            raise ConfigError("transport is sim or socket")
        if self.transport == "socket" and self.time_mode != "real":
            raise ConfigError("the socket transport runs in real time only")
        if self.timeout_s <= 0:
            raise ConfigError("timeout must be positive")


@dataclass
class ExecutionHandle:
    name: str
    workflow: str
    seed: int
    submitted_at: int
    attempt: int = 0
    status: str = "pending"  # pending | running | completed | failed | timeout
    completed_at: int | None = None
    error: str | None = None
    completed_functions: set = field(default_factory=set)
    digests: dict[str, str] = field(default_factory=dict)
    attempts: list[str] = field(default_factory=list)
    deadline: int | None = None
    _timer: object = field(default=None, repr=False)

    @property
    def execution(self) -> str:
        return self.name if self.attempt == 0 else f"{self.name}#{self.attempt}"

    @property
    def done(self) -> bool:
        return self.status in ("completed", "failed", "timeout")

    @property
    def latency_ns(self) -> int | None:
        if self.completed_at is None:
            return None
        return self.completed_at - self.submitted_at


@dataclass
class _Registered:
    spec: WorkflowSpec
    view: DagView
    placement: Placement
    plans: list[NodePlan]


class Engine:
    """A simulated cluster running one invocation policy.

    Typical use::

        engine = Engine(EngineConfig(nodes=2, policy="dataflow"))
        engine.register(spec)
        handle = engine.submit(spec.name, seed=1)
        engine.run()
    """

    def __init__(self, config: EngineConfig | None = None, trace: ExecutionTrace | None = None):
        self.config = cfg = config or EngineConfig()
        self.trace = trace if trace is not None else ExecutionTrace()
        if cfg.time_mode == "real":
            self.sim: Simulator = RealTimeSimulator(cfg.realtime_speed)
        else:
            self.sim = Simulator()
        self.node_ids = list(range(cfg.nodes))
        self.relay = None
        if cfg.transport == "socket":
            from .transport.sockets import SocketRelay

            self.relay = SocketRelay(self.sim, self.node_ids + [MASTER])
        self.fabric = Fabric(
            self.sim, self.node_ids, latency_ns=ms_to_ns(cfg.latency_ms), chunk_size=cfg.chunk_size,
            trace=self.trace, relay=self.relay, trace_chunks=cfg.trace_chunks,
        )
        timeout_ns = int(cfg.timeout_s * NS_PER_S)
        get_timeout = timeout_ns if cfg.get_timeout_s is None else int(cfg.get_timeout_s * NS_PER_S)
        if cfg.store == "dstore":
            self.store = DStore(
                self.sim, self.fabric, self.node_ids,
                metadata_write_ns=int(round(cfg.metadata_write_us * 1000)),
                memcpy_ns_per_byte=cfg.memcpy_ns_per_byte,
                get_timeout_ns=get_timeout,
                capacity_bytes=cfg.store_capacity_bytes,
                max_fetch_retries=cfg.max_fetch_retries,
                hash_data=cfg.hash_data,
                check_reads=cfg.check_reads,
                trace=self.trace,
            )
        else:
            self.store = CentralStore(self.sim, self.fabric, self.node_ids, trace=self.trace,
                                      hash_data=cfg.hash_data, check_reads=cfg.check_reads)
        local_policy = {
            "dataflow": SchedulerPolicy.DATAFLOW,
            "controlflow": SchedulerPolicy.CONTROLFLOW,
            "cflow": SchedulerPolicy.CENTRAL,
        }[cfg.policy]
        self.pools = {
            n: ContainerPool(self.sim, n, cfg.pool_cap, int(cfg.container_lifetime_s * NS_PER_S), self.trace)
            for n in self.node_ids
        }
        self.schedulers = {
            n: LocalScheduler(n, self.sim, self.fabric, self.pools[n], self.store, local_policy,
                              self.trace, observer=self)
            for n in self.node_ids
        }
        self.master = CentralScheduler(self.sim, self.fabric, self.trace) if cfg.policy == "cflow" else None
        self.alive = set(self.node_ids)
        self.workflows: dict[str, _Registered] = {}
        self.handles: list[ExecutionHandle] = []
        self._by_attempt: dict[str, ExecutionHandle] = {}
        self._ids = itertools.count()
        self.timeout_ns = timeout_ns
        self.listeners: list = []  # called with each handle once it is done
        for bw in cfg.bandwidth:
            self.set_bandwidth(bw.target, bw.bytes_per_sec, bw.scope)

    # -- setup ---------------------------------------------------------------

    def set_bandwidth(self, target, bytes_per_sec: float, scope: str = "ingress") -> None:
        if target == "all":
            self.fabric.set_all_bandwidth(bytes_per_sec, scope)
        elif target == "master":
            self.fabric.set_bandwidth(MASTER, bytes_per_sec, scope)
        elif target == "workers":
            for n in self.node_ids:
                self.fabric.set_bandwidth(n, bytes_per_sec, scope)
        else:
            self.fabric.set_bandwidth(target, bytes_per_sec, scope)

    def register(self, spec: WorkflowSpec, placement: Placement | None = None) -> Placement:
        """Partition ``spec`` and hand every node its plan (synchronous setup)."""
        view = build_dag_view(spec)
        if placement is None:
            placement = self._place(spec, view)
        elif not placement.covers(spec):
            raise ConfigError("placement does not cover every function")
        self._install(spec, view, placement)
        return placement

    def _place(self, spec: WorkflowSpec, view: DagView) -> Placement:
        if self.alive == set(self.node_ids):
            return partition(spec, view, self.config.nodes, self.config.partition)
        return repartition_and_restart(spec, self.alive, self.config.nodes, self.config.partition)

    def _install(self, spec: WorkflowSpec, view: DagView, placement: Placement) -> None:
        if any(n not in self.alive for n in placement.assignment.values()):
            raise ConfigError("placement uses a failed node")
        plans = compute_node_plans(spec, view, placement, self.config.lookahead_depth)
        self.workflows[spec.name] = _Registered(spec, view, placement, plans)
        for plan in plans:
            if plan.node in self.alive:
                # plans travel in their wire form, like a RegisterPlan message
                self.schedulers[plan.node].register_plan(NodePlan.from_json(plan.to_json()), spec)
        if self.master is not None:
            self.master.register(spec, placement, view)
        self.trace.record(self.sim.now, MASTER, "WorkflowRegistered", None, None, workflow=spec.name,
                          placement=dict(placement.assignment))

    def placement(self, workflow: str) -> Placement:
        return self.workflows[workflow].placement

    # -- executions ------------------------------------------------------------

    def submit(self, workflow: str, execution: str | None = None, seed: int = 0,
               at: int | None = None) -> ExecutionHandle:
        if workflow not in self.workflows:
            raise KeyError(f"workflow {workflow!r} is not registered")
        name = execution or f"{workflow}-{next(self._ids):05d}"
        if "#" in name:
            raise ValueError("'#' is reserved for restart attempts")
        when = self.sim.now if at is None else at
        handle = ExecutionHandle(name, workflow, seed, submitted_at=when)
        handle.deadline = when + self.timeout_ns
        self.handles.append(handle)
        self.sim.at(when, self._start, handle)
        return handle

    def _start(self, handle: ExecutionHandle) -> None:
        if handle.done:
            return
        reg = self.workflows[handle.workflow]
        execution = handle.execution
        handle.status = "running"
        handle.attempts.append(execution)
        handle.completed_functions = set()
        self._by_attempt[execution] = handle
        self.trace.record(self.sim.now, MASTER, "ExecutionStarted", execution, None,
                          workflow=handle.workflow, attempt=handle.attempt, seed=handle.seed)
        if handle._timer is None:
            handle._timer = self.sim.at(max(handle.deadline, self.sim.now), self._timeout, handle)
        self._seed_external(reg.spec, execution, handle.seed)
        if not reg.spec.functions:
            self._finish(handle, "completed")
            return
        if self.master is not None:
            for n in sorted(self.alive):
                self.schedulers[n].on_workflow_arrival(handle.workflow, execution, handle.seed)
            self.master.on_workflow_arrival(handle.workflow, execution)
        else:
            for n in sorted(self.alive):
                self.schedulers[n].on_workflow_arrival(handle.workflow, execution, handle.seed)

    def _seed_external(self, spec: WorkflowSpec, execution: str, seed: int) -> None:
        """Make external inputs available before any function runs."""
        if not spec.external_inputs:
            return
        placement = self.workflows[spec.name].placement
        for key in spec.external_inputs:
            buf = make_output(seed, "__external__", key, spec.external_input_bytes)
            data_id = DataId(execution, key)
            consumers = [f.name for f in spec.functions if key in f.inputs]
            node = placement.node_of(consumers[0]) if consumers else min(self.alive)
            if isinstance(self.store, DStore):
                self.store.agents[node].local.install(LocalStoreEntry(data_id, buf))
                self.store.directory.register(data_id, len(buf), node)
                self.store.put_ids.add(data_id)
                self.store.digests[data_id] = digest(buf)
            else:
                from .central import CentralStoreEntry

                self.store.entries[data_id] = CentralStoreEntry(data_id, buf)
                self.store.put_ids.add(data_id)
                self.store.digests[data_id] = digest(buf)

    # observer callbacks from the local schedulers

    def function_completed(self, node: int, execution: str, function: str) -> None:
        handle = self._by_attempt.get(execution)
        if handle is None or handle.execution != execution or handle.done:
            return
        handle.completed_functions.add(function)
        if len(handle.completed_functions) == len(self.workflows[handle.workflow].spec.functions):
            self._finish(handle, "completed")

    def function_failed(self, node: int, execution: str, function: str, error: BaseException) -> None:
        handle = self._by_attempt.get(execution)
        if handle is None or handle.execution != execution or handle.done:
            return
        if isinstance(error, ExecutionAborted) and node not in self.alive:
            return
        handle.error = f"{function}: {type(error).__name__}: {error}"
        self.trace.record(self.sim.now, node, "ExecutionFailed", execution, function, error=handle.error)
        self._abort_attempt(execution)
        self._finish(handle, "failed")

    def _finish(self, handle: ExecutionHandle, status: str) -> None:
        handle.status = status
        execution = handle.execution
        if status == "timeout":
            handle.completed_at = handle.deadline
        else:
            handle.completed_at = self.sim.now
        if handle._timer is not None:
            handle._timer.cancel()
        handle.digests = {
            d.key: h for d, h in sorted(self.store.digests.items()) if d.execution == execution
        }
        for n in self.node_ids:
            self.schedulers[n].finish(execution)
        if self.master is not None:
            self.master.finish(execution)
        event = {"completed": "ExecutionCompleted", "failed": "ExecutionAborted",
                 "timeout": "ExecutionTimeout"}[status]
        self.trace.record(self.sim.now, MASTER, event, execution, None,
                          latency_ns=handle.latency_ns, attempt=handle.attempt)
        if status == "completed" and self.config.free_on_complete:
            self.store.drop_execution(execution)
        for listener in self.listeners:
            listener(handle)

    def _timeout(self, handle: ExecutionHandle) -> None:
        if handle.done:
            return
        self._abort_attempt(handle.execution)
        self._finish(handle, "timeout")

    def _abort_attempt(self, execution: str) -> None:
        for n in self.node_ids:
            self.schedulers[n].abort(execution)
        if self.master is not None:
            self.master.abort(execution)
        self.store.drop_execution(execution)

    # -- failures --------------------------------------------------------------

    def fail_node(self, node: int, at: int | None = None) -> None:
        """Crash ``node`` (now or at virtual time ``at``); running executions restart."""
        if at is not None and at > self.sim.now:
            self.sim.at(at, self.fail_node, node)
            return
        if node not in self.alive:
            return
        self.alive.discard(node)
        self.fabric.fail(node)
        for execution in self.schedulers[node].active():
            self.schedulers[node].abort(execution)
        self.store.remove_node(node)
        if not self.alive:
            for handle in self.handles:
                if not handle.done and handle.status == "running":
                    self._abort_attempt(handle.execution)
                    handle.error = "no surviving nodes"
                    self._finish(handle, "failed")
            return
        running = [h for h in self.handles if h.status == "running" and not h.done]
        for reg in list(self.workflows.values()):
            placement = repartition_and_restart(reg.spec, self.alive, self.config.nodes, self.config.partition)
            self._install(reg.spec, reg.view, placement)
        for handle in running:
            old = handle.execution
            self._abort_attempt(old)
            handle.attempt += 1
            self.trace.record(self.sim.now, MASTER, "Restart", handle.execution, None,
                              previous=old, failed_node=node, survivors=sorted(self.alive))
            self._start(handle)

    # -- driving ---------------------------------------------------------------

    def run(self, until: int | None = None) -> None:
        self.sim.run(until=until)

    def pending(self) -> list[ExecutionHandle]:
        return [h for h in self.handles if not h.done]

    def drive_execution(self, spec: WorkflowSpec, placement: Placement | None = None,
                        execution: str | None = None, seed: int = 0) -> ExecutionTrace:
        """Register, run one execution to completion and return its trace."""
        if spec.name not in self.workflows or placement is not None:
            self.register(spec, placement)
        handle = self.submit(spec.name, execution, seed)
        self.run()
        if handle.status == "timeout":
            raise ExecutionTimeout(f"{handle.execution} exceeded {self.config.timeout_s}s")
        events = set(handle.attempts)
        return ExecutionTrace(e for e in self.trace if e.execution in events or e.execution is None)

    def close(self) -> None:
        if self.relay is not None:
            self.relay.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def run_once(spec: WorkflowSpec, config: EngineConfig | None = None, seed: int = 0,
             placement: Placement | None = None) -> tuple[Engine, ExecutionHandle]:
    """Convenience: fresh engine, one execution, run to the end."""
    engine = Engine(config)
    engine.register(spec, placement)
    handle = engine.submit(spec.name, seed=seed)
    engine.run()
    engine.close()
    return engine, handle


def final_keys(spec: WorkflowSpec) -> Iterable[str]:
    consumed = {k for f in spec.functions for k in f.inputs}
    return [k for f in spec.functions for k in f.outputs if k not in consumed]
