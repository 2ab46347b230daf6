import hashlib

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfsim.dstore import DataId, DStore, DuplicateIdError, ExecutionAborted, GetTimeout, StoreFull
from wfsim.simcore import Simulator, ms_to_ns, transfer_ns
from wfsim.transport import Fabric

MiB = 1 << 20
L = ms_to_ns(1)
M = 150_000


def _cluster(nodes=(0, 1, 2), latency_ns=L, **kw):
    sim = Simulator()
    fab = Fabric(sim, nodes, latency_ns=latency_ns)
    return sim, fab, DStore(sim, fab, nodes, **kw)


def _result(p):
    assert p.done, "pending never resolved"
    return p.result()


def test_put_publishes_metadata():
    sim, fab, ds = _cluster()
    x = DataId("ex", "x")
    p = ds.put(1, x, bytes(MiB))
    sim.run()
    _result(p)
    meta = ds.directory.lookup(x)
    assert meta.size_bytes == MiB and meta.locations == [1]
    assert fab.trace.time_of("MetaRegister") == L + M
    with pytest.raises(DuplicateIdError):
        ds.put(2, x, b"again")


def test_put_resolves_after_copy():
    sim, fab, ds = _cluster(memcpy_ns_per_byte=2.0)
    p = ds.put(0, DataId("ex", "x"), bytes(1000))
    done_at = []
    p.add_callback(lambda _: done_at.append(sim.now))
    sim.run()
    assert done_at == [2000]
    assert fab.trace.time_of("MetaRegister") == 2000 + L + M


def test_local_get_no_transfer():
    sim, fab, ds = _cluster()
    x = DataId("ex", "x")
    ds.put(1, x, b"hello")
    sim.run()
    p = ds.get(1, x)
    sim.run()
    assert _result(p) == b"hello"
    assert not fab.trace.select("TransferStart")
    assert not fab.trace.select("MetaQuery")


def test_get_before_put_blocks_then_wakes():
    sim, fab, ds = _cluster()
    x = DataId("ex", "x")
    hooks = []
    p = ds.get(2, x, "B", on_block=lambda: hooks.append(("block", sim.now)),
               on_wake=lambda: hooks.append(("wake", sim.now)))
    sim.schedule(ms_to_ns(50), ds.put, 1, x, b"payload")
    sim.run()
    assert _result(p) == b"payload"
    put_t = ms_to_ns(50)
    assert hooks == [("block", 2 * L), ("wake", put_t + L + M + L)]
    assert fab.trace.first("Block").function == "B"


def test_remote_get_sequence():
    sim, fab, ds = _cluster()
    x = DataId("ex", "x")
    ds.put(1, x, bytes(1000))
    sim.run()
    start = sim.now
    p = ds.get(2, x)
    sim.run()
    assert len(_result(p)) == 1000
    tr = fab.trace
    order = [tr.time_of(e) for e in ("MetaQuery", "FetchRequest", "TransferStart", "ReplicaInstalled", "GetServed")]
    assert order == sorted(order)
    assert tr.first("TransferStart").detail["src"] == 1
    assert tr.time_of("GetServed") == start + 4 * L
    # the new replica is registered afterwards
    assert ds.directory.lookup(x).locations == [1, 2]
    assert ds.holders(x) == [1, 2]


def test_fetch_to_holder_is_noop():
    sim, fab, ds = _cluster()
    x = DataId("ex", "x")
    ds.put(1, x, b"abc")
    sim.run()
    before = len(fab.trace.select("TransferStart"))
    assert _result(_run(sim, ds.get(1, x))) == b"abc"
    assert len(fab.trace.select("TransferStart")) == before


def _run(sim, p):
    sim.run()
    return p


def test_concurrent_gets_share_one_transfer():
    sim, fab, ds = _cluster()
    x = DataId("ex", "x")
    ds.put(0, x, bytes(5000))
    sim.run()
    ps = [ds.get(2, x, f"f{i}") for i in range(3)]
    sim.run()
    assert all(len(_result(p)) == 5000 for p in ps)
    assert len(fab.trace.select("TransferStart")) == 1


def test_fine_grained_gather():
    # input a is transferred while input b is still unpublished
    sim, fab, ds = _cluster()
    fab.set_bandwidth(2, 50e6, "ingress")
    a, b = DataId("ex", "a"), DataId("ex", "b")
    size = 8 * MiB
    g = ds.gather(2, [a, b], "C")
    sim.schedule(ms_to_ns(1000), ds.put, 0, a, bytes(size))
    sim.schedule(ms_to_ns(2000), ds.put, 1, b, bytes(size))
    sim.run()
    got = _result(g)
    assert list(got) == [a, b]
    done = {e.detail["data"]: e.t for e in fab.trace.select("TransferDone")}
    b_registered = [e.t for e in fab.trace.select("MetaRegister") if e.detail["key"] == "b"][0]
    assert done[a.wire()] < b_registered
    xfer = 128 * transfer_ns(64 * 1024, 50_000_000)
    assert fab.trace.time_of("GetServed", function="C", key="b") == ms_to_ns(2000) + 4 * L + M + xfer


def test_fan_in_wake_times():
    # one blocked reader per input; each wakes when its own producer publishes
    sim, fab, ds = _cluster(nodes=tuple(range(9)))
    ids = [DataId("ex", f"p{i}") for i in range(8)]
    g = ds.gather(8, ids, "sink")
    put_at = {}
    for i, d in enumerate(ids):
        t = ms_to_ns(100 + 37 * i)
        put_at[d.key] = t
        sim.schedule(t, ds.put, i, d, bytes(100))
    sim.run()
    _result(g)
    wakes = {e.detail["key"]: e.t for e in fab.trace.select("Wake")}
    assert wakes == {k: t + L + M + L for k, t in put_at.items()}


def test_store_full():
    sim, fab, ds = _cluster(capacity_bytes=100)
    ds.put(0, DataId("ex", "a"), bytes(80))
    with pytest.raises(StoreFull):
        ds.put(0, DataId("ex", "b"), bytes(30))


def test_replica_install_respects_capacity():
    sim, fab, ds = _cluster(capacity_bytes=100)
    x = DataId("ex", "x")
    ds.put(0, x, bytes(80))
    ds.put(1, DataId("ex", "y"), bytes(80))
    sim.run()
    p = ds.get(1, x)
    sim.run()
    assert isinstance(p.error(), StoreFull)


def test_get_timeout():
    sim, fab, ds = _cluster(get_timeout_ns=ms_to_ns(30))
    p = ds.get(1, DataId("ex", "never"))
    sim.run()
    assert isinstance(p.error(), GetTimeout)
    assert fab.trace.time_of("GetTimeout") == ms_to_ns(30)


def test_drop_execution_fails_readers_and_forgets_data():
    sim, fab, ds = _cluster()
    x, y = DataId("ex", "x"), DataId("ex", "y")
    ds.put(0, x, b"old")
    sim.run()
    waiting = ds.get(1, y)
    sim.run()
    ds.drop_execution("ex")
    sim.run()
    assert isinstance(waiting.error(), ExecutionAborted)
    assert ds.holders(x) == [] and ds.directory.lookup(x) is None
    late = ds.get(2, x)
    sim.run()
    assert isinstance(late.error(), ExecutionAborted)


def test_fetch_retries_another_replica_when_source_dies():
    sim, fab, ds = _cluster(nodes=(0, 1, 2, 3))
    fab.set_bandwidth(3, 1e6, "ingress")
    x = DataId("ex", "x")
    ds.put(0, x, bytes(200_000))
    sim.run()
    _run(sim, ds.get(1, x))
    assert ds.directory.lookup(x).locations == [0, 1]
    p = ds.get(3, x)
    sim.run(until=sim.now + ms_to_ns(50))
    src = fab.trace.select("FetchRequest")[-1].detail["source"]
    fab.fail(src)
    ds.remove_node(src)
    sim.run()
    assert len(_result(p)) == 200_000
    assert fab.trace.select("FetchRetry")


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.sampled_from("pg"), st.integers(0, 2), st.integers(0, 5), st.binary(max_size=300)),
                max_size=40))
def test_buffers_never_mutate(ops):
    sim, fab, ds = _cluster(latency_ns=1000)
    expected: dict[DataId, str] = {}
    pendings = []
    for kind, node, k, payload in ops:
        d = DataId("ex", f"k{k}")
        if kind == "p" and d not in expected:
            expected[d] = hashlib.sha256(payload).hexdigest()
            ds.put(node, d, payload)
        elif kind == "g" and d in expected:
            pendings.append((d, ds.get(node, d)))
        sim.run()
    for d, p in pendings:
        assert hashlib.sha256(_result(p)).hexdigest() == expected[d]
    for agent in ds.agents.values():
        for d, entry in agent.local.entries.items():
            assert hashlib.sha256(entry.buffer).hexdigest() == expected[d]
