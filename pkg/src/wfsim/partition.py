"""Global scheduler: DAG partitioning and per-node plan dissemination."""
from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping

from .workflow import DagView, WorkflowSpec, build_dag_view

STRATEGIES = ("round_robin", "greedy_edge_cut")


class NoNodesError(RuntimeError):
    pass


@dataclass(frozen=True)
class Placement:
    assignment: Mapping[str, int]
    node_count: int

    def __post_init__(self):
        if self.node_count < 1:
            raise ValueError("node_count must be >= 1")
        for f, n in self.assignment.items():
            if not 0 <= n < self.node_count:
                raise ValueError(f"{f} placed on node {n}, outside [0, {self.node_count})")

    def node_of(self, function: str) -> int:
        return self.assignment[function]

    def functions_on(self, node: int) -> list[str]:
        return [f for f, n in self.assignment.items() if n == node]

    @property
    def nodes_used(self) -> list[int]:
        return sorted(set(self.assignment.values()))

    def covers(self, spec: WorkflowSpec) -> bool:
        return set(self.assignment) == set(spec.names)


def cut_weight(spec: WorkflowSpec, assignment: Mapping[str, int]) -> int:
    """Bytes crossing node boundaries: producer output size summed over cut edges."""
    return sum(
        spec.edge_bytes(e) for e in spec.edges if assignment[e.source] != assignment[e.dest]
    )


def _round_robin(view: DagView, nodes: int) -> dict[str, int]:
    return {f: i % nodes for i, f in enumerate(view.topo_order)}


def _greedy(spec: WorkflowSpec, view: DagView, nodes: int) -> dict[str, int]:
    cap = math.ceil(len(view.topo_order) / nodes)
    load = [0] * nodes
    out: dict[str, int] = {}
    for f in view.topo_order:
        pull: Counter = Counter()
        for e in spec.edges:
            if e.dest == f:
                pull[out[e.source]] += spec.edge_bytes(e)
        target = None
        if pull:
            best = max(pull.values())
            if best > 0:
                cand = min(n for n, b in pull.items() if b == best)
                if load[cand] < cap:
                    target = cand
        if target is None:
            target = min(range(nodes), key=lambda n: (load[n], n))
        out[f] = target
        load[target] += 1
    return out


def partition(
    spec: WorkflowSpec,
    view: DagView | None = None,
    node_count: int = 1,
    strategy: str = "greedy_edge_cut",
) -> Placement:
    """Assign every function to a node in ``[0, node_count)``.

    ``greedy_edge_cut`` walks the topological order and puts each function
    on the node already holding most of its input bytes, subject to a
    ``ceil(|F| / node_count)`` load cap, otherwise on the least loaded node
    (ties to the lowest id).  If that ends up cutting more bytes than
    ``round_robin`` would, the round-robin assignment is returned instead.
    """
    if node_count < 1:
        raise NoNodesError("node_count must be >= 1")
    if strategy not in STRATEGIES:
        raise ValueError(f"unknown strategy {strategy!r}")
    view = view or build_dag_view(spec)
    rr = _round_robin(view, node_count)
    if strategy == "round_robin":
        return Placement(rr, node_count)
    greedy = _greedy(spec, view, node_count)
    if cut_weight(spec, greedy) > cut_weight(spec, rr):
        return Placement(rr, node_count)
    return Placement(greedy, node_count)


@dataclass
class NodePlan:
    """Everything one local scheduler needs to run its share of a workflow.

    ``lookahead`` maps each function to the functions to invoke when it
    completes under the dataflow policy (descendants at exactly ``depth``
    edges), with their owner nodes.  ``depth`` of ``None`` means the whole
    DAG is invoked at arrival.
    """

    node: int
    workflow: str
    functions: list[str]
    local_entry_points: list[tuple[str, str]]  # (function, "entry" | "prewarm")
    successor_map: dict[str, list[tuple[str, int]]]
    predecessors: dict[str, list[str]]
    predecessor_count: dict[str, int]
    lookahead: dict[str, list[tuple[str, int]]]
    input_keys: dict[str, list[str]]
    output_keys: dict[str, list[str]]
    depth: int | None = 2
    assignment: dict[str, int] = field(default_factory=dict)

    @property
    def arrival_set(self) -> list[str]:
        return [f for f, _ in self.local_entry_points]

    @property
    def entry_points(self) -> list[str]:
        return [f for f, tag in self.local_entry_points if tag == "entry"]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=False, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: Mapping) -> "NodePlan":
        pairs = lambda m: {k: [tuple(x) for x in v] for k, v in m.items()}  # noqa: E731
        return cls(
            node=d["node"],
            workflow=d["workflow"],
            functions=list(d["functions"]),
            local_entry_points=[tuple(x) for x in d["local_entry_points"]],
            successor_map=pairs(d["successor_map"]),
            predecessors={k: list(v) for k, v in d["predecessors"].items()},
            predecessor_count=dict(d["predecessor_count"]),
            lookahead=pairs(d["lookahead"]),
            input_keys={k: list(v) for k, v in d["input_keys"].items()},
            output_keys={k: list(v) for k, v in d["output_keys"].items()},
            depth=d["depth"],
            assignment=dict(d["assignment"]),
        )

    @classmethod
    def from_json(cls, text: str) -> "NodePlan":
        return cls.from_dict(json.loads(text))


def arrival_set(spec: WorkflowSpec, view: DagView, depth: int | None = 2) -> list[str]:
    """Functions the dataflow policy invokes at workflow arrival.

    Entry points plus everything fewer than ``depth`` edges below one, in
    topological order.  Depth 2 gives entry points and their successors.
    """
    if depth is None:
        return list(view.topo_order)
    if depth < 1:
        raise ValueError("lookahead depth must be >= 1")
    chosen = set(spec.entry_points)
    for e in spec.entry_points:
        for d in range(1, depth):
            chosen.update(view.descendants_at(e, d))
    return [f for f in view.topo_order if f in chosen]


def compute_node_plans(
    spec: WorkflowSpec,
    view: DagView | None,
    placement: Placement,
    depth: int | None = 2,
) -> list[NodePlan]:
    """One plan per node in ``[0, node_count)``, including nodes with no functions."""
    view = view or build_dag_view(spec)
    at_arrival = arrival_set(spec, view, depth)
    entries = set(spec.entry_points)
    where = placement.assignment
    plans = []
    for node in range(placement.node_count):
        local = [f for f in view.topo_order if where[f] == node]
        plans.append(NodePlan(
            node=node,
            workflow=spec.name,
            functions=local,
            local_entry_points=[
                (f, "entry" if f in entries else "prewarm") for f in at_arrival if where[f] == node
            ],
            successor_map={f: [(s, where[s]) for s in view.successors[f]] for f in local},
            predecessors={f: list(view.predecessors[f]) for f in local},
            predecessor_count={f: len(view.predecessors[f]) for f in local},
            lookahead={
                f: [] if depth is None else [(t, where[t]) for t in view.descendants_at(f, depth)]
                for f in local
            },
            input_keys={f: list(spec.function(f).inputs) for f in local},
            output_keys={f: list(spec.function(f).outputs) for f in local},
            depth=depth,
            assignment=dict(where),
        ))
    return plans


def repartition_and_restart(
    spec: WorkflowSpec,
    surviving_nodes: Iterable[int],
    node_count: int | None = None,
    strategy: str = "greedy_edge_cut",
    store=None,
    execution: str | None = None,
) -> Placement:
    """Place ``spec`` on the surviving nodes only.

    When ``store`` and ``execution`` are given the store is told to drop
    everything the failed attempt wrote before the new placement is returned.
    """
    survivors = sorted(set(surviving_nodes))
    if not survivors:
        raise NoNodesError("no surviving nodes")
    if store is not None and execution is not None:
        store.drop_execution(execution)
    dense = partition(spec, None, len(survivors), strategy)
    total = node_count if node_count is not None else survivors[-1] + 1
    return Placement({f: survivors[n] for f, n in dense.assignment.items()}, total)
