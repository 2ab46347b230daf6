import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfsim.dstore import DataId, DStore
from wfsim.runtime import BodyHooks, ContainerPool, SlotState, execute_body, make_output, output_seed
from wfsim.simcore import Simulator, ms_to_ns
from wfsim.trace import ExecutionTrace
from wfsim.transport import Fabric
from wfsim.workflow import FunctionDef

COLD = ms_to_ns(500)


def _acquire_times(sim, pool, requests):
    """requests: list of (at_ns, function, hold_ns); returns grant times in order."""
    granted = {}

    def ask(i, fn, hold):
        p = pool.acquire(fn, f"ex{i}", COLD)

        def got(p):
            granted[i] = sim.now
            sim.schedule(hold, pool.release, p.result())
        p.add_callback(got)

    for i, (at, fn, hold) in enumerate(requests):
        sim.at(at, ask, i, fn, hold)
    sim.run()
    return [granted[i] for i in range(len(requests))]


def test_first_invocation_pays_coldstart():
    sim = Simulator()
    pool = ContainerPool(sim, 0)
    assert _acquire_times(sim, pool, [(0, "A", 10)]) == [COLD]


def test_warm_reuse_is_free():
    sim = Simulator()
    pool = ContainerPool(sim, 0)
    t = _acquire_times(sim, pool, [(0, "A", 10), (ms_to_ns(2000), "A", 10)])
    assert t == [COLD, ms_to_ns(2000)]


def test_warm_slot_is_per_function():
    sim = Simulator()
    pool = ContainerPool(sim, 0, cap=1)
    t = _acquire_times(sim, pool, [(0, "A", 10), (ms_to_ns(2000), "B", 10)])
    assert t == [COLD, ms_to_ns(2000) + COLD]
    assert pool.slots[0].function == "B"


def test_cap_one_serializes():
    sim = Simulator()
    pool = ContainerPool(sim, 0, cap=1)
    hold = ms_to_ns(300)
    t = _acquire_times(sim, pool, [(0, "A", hold), (0, "A", hold)])
    # second request reuses the warm slot the moment the first releases
    assert t == [COLD, COLD + hold]
    assert pool.trace.select("PoolQueued")


def test_expired_slot_is_cold_again():
    sim = Simulator()
    pool = ContainerPool(sim, 0, lifetime_ns=ms_to_ns(1000))
    t = _acquire_times(sim, pool, [(0, "A", 0), (COLD + ms_to_ns(1500), "A", 0)])
    assert t[1] - (COLD + ms_to_ns(1500)) == COLD


def test_cold_slot_preferred_over_reimaging():
    sim = Simulator()
    pool = ContainerPool(sim, 0, cap=2)
    _acquire_times(sim, pool, [(0, "A", 0), (ms_to_ns(600), "B", 0)])
    assert {s.function for s in pool.slots} == {"A", "B"}
    assert all(s.state == SlotState.WARM for s in pool.slots)


def test_cancel_execution_frees_slot_and_queue():
    sim = Simulator()
    pool = ContainerPool(sim, 0, cap=1)
    a = pool.acquire("A", "ex1", COLD)
    b = pool.acquire("B", "ex1", COLD)
    c = pool.acquire("C", "ex2", COLD)
    pool.cancel_execution("ex1")
    sim.run()
    assert not a.done and not b.done
    assert c.done and c.result().holder == ("ex2", "C")


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 4), st.lists(
    st.tuples(st.integers(0, 3000), st.sampled_from("ABC"), st.integers(0, 800)), min_size=1, max_size=15))
def test_occupancy_never_exceeds_cap(cap, reqs):
    sim = Simulator()
    pool = ContainerPool(sim, 0, cap=cap)
    holders = []
    original = pool._busy

    def watched(slot, req):
        original(slot, req)
        busy = [s for s in pool.slots if s.state in (SlotState.BUSY, SlotState.WARMING)]
        assert len(busy) <= cap
        assert len({s.holder for s in busy}) == len(busy)
        holders.append(slot.holder)

    pool._busy = watched
    times = _acquire_times(sim, pool, [(ms_to_ns(a), f, ms_to_ns(h)) for a, f, h in reqs])
    assert len(times) == len(reqs)
    assert pool.peak_busy <= cap


def test_outputs_are_deterministic():
    a = make_output(7, "A", "a.out", 4096)
    assert a == make_output(7, "A", "a.out", 4096)
    assert a != make_output(8, "A", "a.out", 4096)
    assert a != make_output(7, "B", "a.out", 4096)
    assert make_output(7, "A", "a.out", 0) == b""
    assert output_seed(1, "f", "k") == output_seed(1, "f", "k")


def _body_env():
    sim = Simulator()
    trace = ExecutionTrace()
    fab = Fabric(sim, [0, 1], trace=trace)
    store = DStore(sim, fab, [0, 1])
    pool = ContainerPool(sim, 0, trace=trace)
    return sim, trace, store, pool


def test_entry_body_compute_time():
    sim, trace, store, pool = _body_env()
    fn = FunctionDef("A", (), ("a",), 1000.0, 64)
    done = []
    p = pool.acquire("A", "ex", 0)
    p.add_callback(lambda p: execute_body(sim, trace, store, p.result(), fn, "ex", 3,
                                          BodyHooks(on_done=done.append)))
    sim.run()
    assert done == [None]
    assert trace.time_of("BodyCompleted") - trace.time_of("BodyStarted") == ms_to_ns(1000)
    assert store.digests[DataId("ex", "a")] == hashlib.blake2b(make_output(3, "A", "a", 64),
                                                               digest_size=16).hexdigest()


def test_compute_waits_for_inputs():
    sim, trace, store, pool = _body_env()
    fn = FunctionDef("C", ("x",), ("c",), 10.0, 8)
    p = pool.acquire("C", "ex", 0)
    p.add_callback(lambda p: execute_body(sim, trace, store, p.result(), fn, "ex", 0, BodyHooks()))
    sim.schedule(ms_to_ns(40), store.put, 1, DataId("ex", "x"), b"input")
    sim.run()
    served = trace.time_of("GetServed", function="C")
    assert trace.time_of("GatherDone") == served >= ms_to_ns(40)
    assert trace.time_of("BodyCompleted") == served + ms_to_ns(10)


def test_duplicate_output_fails_body():
    sim, trace, store, pool = _body_env()
    store.put(0, DataId("ex", "a"), b"taken")
    fn = FunctionDef("A", (), ("a",), 1.0, 8)
    errors = []
    p = pool.acquire("A", "ex", 0)
    p.add_callback(lambda p: execute_body(sim, trace, store, p.result(), fn, "ex", 0,
                                          BodyHooks(on_done=errors.append)))
    sim.run()
    assert type(errors[0]).__name__ == "DuplicateIdError"
    assert trace.select("BodyFailed")


def test_invalid_cap():
    with pytest.raises(ValueError):
        ContainerPool(Simulator(), 0, cap=0)


def test_blocked_holder_yields_only_when_someone_waits():
    sim = Simulator()
    pool = ContainerPool(sim, 0, cap=1)
    first = pool.acquire("B", "ex", 0)
    sim.run()
    slot = first.result()
    gave = []
    pool.offer_yield(slot, lambda: (gave.append(sim.now), pool.release(slot)))
    assert gave == []  # nobody waiting: the blocked holder keeps its slot
    second = []
    sim.at(ms_to_ns(100), lambda: second.append(pool.acquire("A", "ex", 0)))
    sim.run()
    assert gave == [ms_to_ns(100)]
    assert second[0].done and second[0].result().holder == ("ex", "A")


def test_withdrawn_holder_is_not_reclaimed():
    sim = Simulator()
    pool = ContainerPool(sim, 0, cap=1)
    p = pool.acquire("B", "ex", 0)
    sim.run()
    slot = p.result()
    pool.offer_yield(slot, lambda: pool.release(slot))
    pool.withdraw_yield(slot)
    q = pool.acquire("A", "ex", 0)
    sim.run()
    assert not q.done and slot.holder == ("ex", "B")
