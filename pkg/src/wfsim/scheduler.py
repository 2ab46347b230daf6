"""Per-node local scheduler.

One class serves three invocation policies:

* ``dataflow``: at arrival invoke the local entry points and their
  successors; whenever a function completes invoke its grand-successors
  (descendants at the plan's lookahead depth).  Invoked functions start at
  once and block inside the store until their inputs exist.
* ``controlflow``: invoke entry points at arrival; a function is invoked
  only once all its predecessors completed.  Completions are pushed
  peer-to-peer to the nodes owning successors.
* ``central``: the node runs whatever the master tells it to and reports
  every completion back to the master (see :mod:`wfsim.central`).
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Protocol

from .partition import NodePlan
from .runtime import BodyHooks, BodyTask, ContainerPool, DataPlane, execute_body
from .simcore import Pending, Simulator, ms_to_ns
from .trace import ExecutionTrace
from .transport import MASTER, Envelope, Fabric, Kind, NodeDown
from .workflow import WorkflowSpec


class SchedulerPolicy(str, enum.Enum):
    DATAFLOW = "dataflow"
    CONTROLFLOW = "controlflow"
    CENTRAL = "central"


class Phase(enum.IntEnum):
    NOT_INVOKED = 0
    INVOKED = 1
    STARTING = 2
    RUNNING = 3
    BLOCKED = 4
    COMPLETED = 5
    FAILED = 6


_ALLOWED = {
    Phase.NOT_INVOKED: {Phase.INVOKED, Phase.FAILED},
    Phase.INVOKED: {Phase.STARTING, Phase.FAILED},
    Phase.STARTING: {Phase.RUNNING, Phase.FAILED},
    Phase.RUNNING: {Phase.BLOCKED, Phase.COMPLETED, Phase.FAILED},
    Phase.BLOCKED: {Phase.RUNNING, Phase.FAILED},
    Phase.COMPLETED: set(),
    Phase.FAILED: set(),
}


class UnknownExecution(KeyError):
    pass


class IllegalTransition(RuntimeError):
    pass


@dataclass
class InvocationState:
    execution: str
    function: str
    phase: Phase = Phase.NOT_INVOKED
    invoked_at: int | None = None
    started_at: int | None = None
    completed_at: int | None = None
    blocked_inputs: int = 0

    def move(self, phase: Phase, now: int) -> None:
        if phase not in _ALLOWED[self.phase]:
            raise IllegalTransition(f"{self.function}: {self.phase.name} -> {phase.name}")
        self.phase = phase
        if phase == Phase.INVOKED:
            self.invoked_at = now
        elif phase == Phase.RUNNING and self.started_at is None:
            self.started_at = now
        elif phase in (Phase.COMPLETED, Phase.FAILED):
            self.completed_at = now


class Observer(Protocol):
    def function_completed(self, node: int, execution: str, function: str) -> None: ...

    def function_failed(self, node: int, execution: str, function: str, error: BaseException) -> None: ...


@dataclass
class _Exec:
    workflow: str
    seed: int
    states: dict[str, InvocationState]
    done_preds: dict[str, set] = field(default_factory=dict)
    sent: set = field(default_factory=set)
    tasks: dict[str, BodyTask] = field(default_factory=dict)


class LocalScheduler:
    def __init__(
        self,
        node: int,
        sim: Simulator,
        fabric: Fabric,
        pool: ContainerPool,
        store: DataPlane,
        policy: SchedulerPolicy | str = SchedulerPolicy.DATAFLOW,
        trace: ExecutionTrace | None = None,
        observer: Observer | None = None,
    ):
        self.node = node
        self.sim = sim
        self.fabric = fabric
        self.pool = pool
        self.store = store
        self.policy = SchedulerPolicy(policy)
        self.trace = trace if trace is not None else fabric.trace
        self.observer = observer
        self.plans: dict[str, NodePlan] = {}
        self.specs: dict[str, WorkflowSpec] = {}
        self.execs: dict[str, _Exec] = {}
        self.finished: set[str] = set()
        fabric.attach(node, self.handle, kinds=(Kind.INVOKE, Kind.COMPLETED, Kind.REGISTER_PLAN))

    # -- setup -----------------------------------------------------------

    def register_plan(self, plan: NodePlan, spec: WorkflowSpec) -> None:
        if plan.node != self.node:
            raise ValueError(f"plan for node {plan.node} given to node {self.node}")
        self.plans[plan.workflow] = plan
        self.specs[plan.workflow] = spec
        self.trace.record(self.sim.now, self.node, "RegisterPlan", None, None,
                          workflow=plan.workflow, functions=len(plan.functions))

    def state(self, execution: str, function: str) -> InvocationState:
        return self.execs[execution].states[function]

    # -- policy entry points -----------------------------------------------

    def on_workflow_arrival(self, workflow: str, execution: str, seed: int = 0) -> list[str]:
        """Start this node's share of a fresh execution; return the functions invoked."""
        plan = self.plans.get(workflow)
        if plan is None:
            raise UnknownExecution(f"no plan for workflow {workflow!r} on node {self.node}")
        if execution in self.execs or execution in self.finished:
            return []
        self.execs[execution] = _Exec(
            workflow, seed,
            {f: InvocationState(execution, f) for f in plan.functions},
            {f: set() for f in plan.functions},
        )
        if self.policy == SchedulerPolicy.DATAFLOW:
            targets = plan.arrival_set
        elif self.policy == SchedulerPolicy.CONTROLFLOW:
            targets = plan.entry_points
        else:
            targets = []
        return [f for f in targets if self.invoke(f, execution, reason="arrival")]

    def invoke(self, function: str, execution: str, reason: str = "") -> bool:
        """Invoke ``function`` once per execution; later calls are no-ops."""
        ex = self.execs.get(execution)
        if ex is None:
            if execution in self.finished:
                return False
            raise UnknownExecution(execution)
        st = ex.states[function]
        if st.phase != Phase.NOT_INVOKED:
            return False
        st.move(Phase.INVOKED, self.sim.now)
        self.trace.record(self.sim.now, self.node, "Invoked", execution, function, reason=reason)
        fn = self.specs[ex.workflow].function(function)
        st.move(Phase.STARTING, self.sim.now)
        self.pool.acquire(function, execution, ms_to_ns(fn.coldstart_millis)).add_callback(
            lambda p: self._slot_ready(execution, function, p)
        )
        return True

    def _slot_ready(self, execution: str, function: str, p: Pending) -> None:
        ex = self.execs.get(execution)
        slot = p.result()
        if ex is None:
            self.pool.release(slot)
            return
        st = ex.states[function]
        st.move(Phase.RUNNING, self.sim.now)
        fn = self.specs[ex.workflow].function(function)
        hooks = BodyHooks(
            on_block=lambda d: self._blocked(execution, function),
            on_wake=lambda d: self._woken(execution, function),
            on_done=lambda err: self._body_done(execution, function, err),
        )
        ex.tasks[function] = execute_body(self.sim, self.trace, self.store, slot, fn, execution, ex.seed, hooks,
                                          self.pool)

    def _blocked(self, execution: str, function: str) -> None:
        ex = self.execs.get(execution)
        if ex is None:
            return
        st = ex.states[function]
        st.blocked_inputs += 1
        if st.phase == Phase.RUNNING:
            st.move(Phase.BLOCKED, self.sim.now)

    def _woken(self, execution: str, function: str) -> None:
        ex = self.execs.get(execution)
        if ex is None:
            return
        st = ex.states[function]
        st.blocked_inputs -= 1
        if st.blocked_inputs == 0 and st.phase == Phase.BLOCKED:
            st.move(Phase.RUNNING, self.sim.now)

    def _body_done(self, execution: str, function: str, error: BaseException | None) -> None:
        ex = self.execs.get(execution)
        if ex is None:
            return
        task = ex.tasks.pop(function, None)
        if task is not None and task.slot is not None:
            self.pool.release(task.slot)
        st = ex.states[function]
        if error is not None:
            if st.phase == Phase.BLOCKED:
                st.blocked_inputs = 0
            st.move(Phase.FAILED, self.sim.now)
            self.trace.record(self.sim.now, self.node, "Failed", execution, function,
                              error=type(error).__name__)
            if self.observer is not None:
                self.observer.function_failed(self.node, execution, function, error)
            return
        st.move(Phase.COMPLETED, self.sim.now)
        self.trace.record(self.sim.now, self.node, "Completed", execution, function)
        if self.observer is not None:
            self.observer.function_completed(self.node, execution, function)
        if execution in self.execs:
            self.on_function_completed(function, execution)

    def on_function_completed(self, function: str, execution: str) -> list[str]:
        """React to a local completion; return the functions invoked locally."""
        ex = self.execs.get(execution)
        if ex is None:
            return []
        plan = self.plans[ex.workflow]
        invoked = []
        if self.policy == SchedulerPolicy.DATAFLOW:
            for target, owner in plan.lookahead.get(function, ()):
                if owner == self.node:
                    if self.invoke(target, execution, reason=f"after:{function}"):
                        invoked.append(target)
                elif target not in ex.sent:
                    ex.sent.add(target)
                    self._send(owner, Kind.INVOKE, execution, function=target, cause=function)
        elif self.policy == SchedulerPolicy.CONTROLFLOW:
            remote = []
            for succ, owner in plan.successor_map.get(function, ()):
                if owner == self.node:
                    invoked += self._pred_done(ex, execution, succ, function)
                elif owner not in remote:
                    remote.append(owner)
            for owner in remote:
                self._send(owner, Kind.COMPLETED, execution, function=function)
        else:
            self._send(MASTER, Kind.COMPLETED, execution, function=function)
        return invoked

    def _pred_done(self, ex: _Exec, execution: str, function: str, pred: str) -> list[str]:
        done = ex.done_preds[function]
        done.add(pred)
        plan = self.plans[ex.workflow]
        if len(done) == plan.predecessor_count[function]:
            if self.invoke(function, execution, reason="join"):
                return [function]
        return []

    def _send(self, dst: int, kind: str, execution: str, **fields) -> None:
        self.trace.record(self.sim.now, self.node, "Send" + kind, execution, fields.get("function"), dst=dst)
        try:
            self.fabric.send(Envelope.control(self.node, dst, kind, execution, execution=execution, **fields))
        except NodeDown:
            pass

    # -- messages ----------------------------------------------------------

    def handle(self, env: Envelope) -> None:
        if env.kind == Kind.REGISTER_PLAN:
            return  # plans arrive through register_plan during the setup phase
        f = env.fields()
        execution = f["execution"]
        ex = self.execs.get(execution)
        if ex is None:
            return  # aborted or finished: late messages are ignored
        if env.kind == Kind.INVOKE:
            self.invoke(f["function"], execution, reason=f"msg:{env.src}")
        elif env.kind == Kind.COMPLETED:
            pred = f["function"]
            plan = self.plans[ex.workflow]
            for local in plan.functions:
                if pred in plan.predecessors[local]:
                    self._pred_done(ex, execution, local, pred)

    # -- lifecycle ---------------------------------------------------------

    def abort(self, execution: str) -> None:
        """Stop every local activity of ``execution`` and forget it."""
        ex = self.execs.pop(execution, None)
        self.finished.add(execution)
        if ex is None:
            return
        for task in ex.tasks.values():
            task.cancel()
        self.pool.cancel_execution(execution)

    def finish(self, execution: str) -> None:
        self.execs.pop(execution, None)
        self.finished.add(execution)

    def active(self) -> list[str]:
        return list(self.execs)
