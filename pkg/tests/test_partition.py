import itertools
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfsim.partition import (
    NodePlan,
    NoNodesError,
    Placement,
    arrival_set,
    compute_node_plans,
    cut_weight,
    partition,
    repartition_and_restart,
)
from wfsim.workflow import build_dag_view, synthesize_workflow

from workloads import diamond, five_step, two_inputs


def _cut(spec, assignment):
    # independent of wfsim.partition.cut_weight: walk the functions' input lists
    total = 0
    for f in spec.functions:
        for key in f.inputs:
            src = spec.producer_of(key)
            if src is not None and assignment[src] != assignment[f.name]:
                total += spec.function(src).output_bytes
    return total


def _reachable(view, start, hops):
    out = set()
    stack = [(start, 0)]
    while stack:
        f, d = stack.pop()
        if d == hops:
            out.add(f)
            continue
        stack.extend((s, d + 1) for s in view.successors[f])
    return out


def test_single_node_takes_everything():
    p = partition(diamond(), node_count=1)
    assert set(p.assignment.values()) == {0}


def test_chain4_greedy_against_brute_force():
    spec = synthesize_workflow("chain:4", output_bytes=1000)
    names = spec.names
    cap = math.ceil(len(names) / 2)
    balanced = []
    for bits in itertools.product((0, 1), repeat=len(names)):
        if max(bits.count(0), bits.count(1)) <= cap:
            balanced.append(_cut(spec, dict(zip(names, bits))))
    greedy = partition(spec, node_count=2, strategy="greedy_edge_cut")
    rr = partition(spec, node_count=2, strategy="round_robin")
    assert _cut(spec, greedy.assignment) == min(balanced) == 1000
    assert _cut(spec, greedy.assignment) <= _cut(spec, rr.assignment) == 3000


def test_two_node_layout_from_architecture_is_legal():
    # A and B together, C alone
    spec = two_inputs()
    p = Placement({"A": 0, "B": 0, "C": 1}, 2)
    assert p.covers(spec)
    plans = compute_node_plans(spec, None, p)
    assert plans[0].functions == ["A", "B"] and plans[1].functions == ["C"]


def test_arrival_set_five_step():
    spec = five_step()
    view = build_dag_view(spec)
    assert set(arrival_set(spec, view)) == {"A", "B", "C", "D"}
    plans = compute_node_plans(spec, view, partition(spec, view, 1))
    assert set(plans[0].arrival_set) == {"A", "B", "C", "D"}
    assert set(plans[0].entry_points) == {"A", "B", "C"}


def test_arrival_set_single_function():
    spec = synthesize_workflow("chain:1")
    assert arrival_set(spec, build_dag_view(spec)) == ["A"]


def test_diamond_two_nodes_by_formula():
    # entry A plus its successors B and C; D is two hops below A
    spec = diamond()
    view = build_dag_view(spec)
    p = Placement({"A": 0, "B": 0, "C": 1, "D": 1}, 2)
    plans = compute_node_plans(spec, view, p)
    reference = {"A"} | _reachable(view, "A", 1)
    assert set(plans[0].arrival_set) == {"A", "B"}
    assert set(plans[1].arrival_set) == {"C"}
    assert set(plans[0].arrival_set) | set(plans[1].arrival_set) == reference
    assert plans[0].lookahead["A"] == [("D", 1)]


def test_depth_none_invokes_everything():
    spec = diamond()
    view = build_dag_view(spec)
    assert arrival_set(spec, view, None) == list(view.topo_order)
    with pytest.raises(ValueError):
        arrival_set(spec, view, 0)


def test_plan_json_round_trip():
    spec = synthesize_workflow("layered:2,3,2", output_bytes=100)
    for plan in compute_node_plans(spec, None, partition(spec, node_count=3)):
        text = plan.to_json()
        assert NodePlan.from_json(text) == plan
        assert text == NodePlan.from_json(text).to_json()
        assert list(plan.to_dict())[:3] == ["node", "workflow", "functions"]


def test_nodes_without_functions_get_empty_plans():
    spec = synthesize_workflow("chain:1")
    plans = compute_node_plans(spec, None, partition(spec, node_count=3))
    assert [len(p.functions) for p in plans] == [1, 0, 0]


def test_restart_two_nodes_one_fails():
    spec = diamond()
    p = repartition_and_restart(spec, [0], node_count=2)
    assert set(p.assignment.values()) == {0}
    assert p.node_count == 2


def test_restart_four_nodes_is_deterministic():
    spec = synthesize_workflow("layered:3,3,3", output_bytes=1000)
    a = repartition_and_restart(spec, [0, 1, 3], node_count=4)
    b = repartition_and_restart(spec, [3, 1, 0], node_count=4)
    assert a == b
    assert set(a.assignment.values()) <= {0, 1, 3}
    assert a.covers(spec)


def test_restart_without_survivors():
    with pytest.raises(NoNodesError):
        repartition_and_restart(diamond(), [])
    with pytest.raises(NoNodesError):
        partition(diamond(), node_count=0)


def test_bad_strategy_and_placement():
    with pytest.raises(ValueError):
        partition(diamond(), node_count=2, strategy="magic")
    with pytest.raises(ValueError):
        Placement({"A": 3}, 2)


SPECS = st.tuples(st.integers(1, 20), st.floats(0, 0.6), st.integers(0, 10_000)).map(
    lambda t: synthesize_workflow(f"random:{t[0]}:{t[1]:.3f}:{t[2]}", output_bytes=(1, 5000), seed=t[2]))


@settings(max_examples=80, deadline=None)
@given(SPECS, st.integers(1, 5), st.sampled_from([1, 2, 3]))
def test_arrival_sets_partition_the_expected_set(spec, nodes, depth):
    view = build_dag_view(spec)
    plans = compute_node_plans(spec, view, partition(spec, view, nodes), depth=depth)
    collected = [f for p in plans for f in p.arrival_set]
    expected = set()
    for e in spec.entry_points:
        for d in range(depth):
            expected |= _reachable(view, e, d)
    assert len(collected) == len(set(collected))
    assert set(collected) == expected


@settings(max_examples=80, deadline=None)
@given(SPECS, st.integers(1, 5))
def test_greedy_never_cuts_more_and_is_deterministic(spec, nodes):
    greedy = partition(spec, node_count=nodes)
    rr = partition(spec, node_count=nodes, strategy="round_robin")
    assert _cut(spec, greedy.assignment) <= _cut(spec, rr.assignment)
    assert cut_weight(spec, greedy.assignment) == _cut(spec, greedy.assignment)
    assert partition(spec, node_count=nodes) == greedy
    assert greedy.covers(spec)
