import random
import threading

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfsim.dstore import DataId, Directory, DirectoryService, ExecutionAborted, QueryTimeout
from wfsim.simcore import Simulator, ms_to_ns
from wfsim.transport import MASTER, Envelope, Fabric, Kind

X = DataId("ex", "x")


def test_register_appends_locations_once():
    d = Directory()
    d.register(X, 10, 1)
    d.register(X, 10, 2)
    d.register(X, 10, 1)
    meta = d.lookup(X)
    assert meta.locations == [1, 2]
    assert meta.size_bytes == 10


def test_tie_break_lowest_node():
    d = Directory()
    d.register(X, 10, 1)
    d.register(X, 10, 2)
    got = []
    d.query(X, got.append)
    assert got[0].source == 1
    assert d.lookup(X).access_frequency == {1: 1, 2: 0}


def _greedy_counts(k, n):
    # the least-used replica serves each query, lowest id on ties
    counts = [0] * k
    for _ in range(n):
        i = min(range(k), key=lambda j: (counts[j], j))
        counts[i] += 1
    return counts


def test_eight_queries_two_replicas():
    d = Directory()
    d.register(X, 10, 1)
    d.register(X, 10, 2)
    for _ in range(8):
        d.query(X, lambda v: None)
    assert d.lookup(X).access_frequency == {1: 4, 2: 4}
    assert _greedy_counts(2, 8) == [4, 4]


def test_two_parked_waiters_wake_once_each():
    d = Directory()
    replies = []
    barrier = threading.Barrier(3)

    def reader(i):
        barrier.wait()
        replies.append((i, d.query_blocking(X, timeout=5).source))

    threads = [threading.Thread(target=reader, args=(i,)) for i in range(2)]
    for t in threads:
        t.start()
    barrier.wait()
    # let both readers park before publishing
    for _ in range(500):
        if d.parked(X) == 2:
            break
        threading.Event().wait(0.002)
    assert d.register(X, 5, 3) == 2
    for t in threads:
        t.join(5)
    assert sorted(i for i, _ in replies) == [0, 1]
    assert d.parked() == 0
    assert d.wakeups == 2


def test_blocking_query_timeout():
    d = Directory()
    with pytest.raises(QueryTimeout):
        d.query_blocking(X, timeout=0.01)
    assert d.parked() == 0


def test_drop_execution_aborts_waiters():
    d = Directory()
    errors = []
    d.query(X, lambda v: pytest.fail("no reply expected"), errors.append)
    d.register(DataId("other", "x"), 1, 0)
    assert d.drop_execution("ex") == 0
    assert isinstance(errors[0], ExecutionAborted)
    assert d.lookup(DataId("other", "x")) is not None


def _service(latency_ms=0.0):
    sim = Simulator()
    fab = Fabric(sim, [0, 1], latency_ns=ms_to_ns(latency_ms))
    svc = DirectoryService(sim, fab)
    inbox = []
    for n in (0, 1):
        fab.attach(n, lambda env: inbox.append((sim.now, env.kind, env.fields())))
    return sim, fab, svc, inbox


def _query(fab, src, key):
    fab.send(Envelope.control(src, MASTER, Kind.QUERY_META, "ex", execution="ex", key=key))


def _register(fab, src, key, size=100):
    fab.send(Envelope.control(src, MASTER, Kind.REGISTER_META, "ex", execution="ex", key=key, size=size, node=src))


def test_reply_never_before_register():
    sim, fab, svc, inbox = _service(latency_ms=1)
    _query(fab, 1, "x")
    sim.schedule(ms_to_ns(10), _register, fab, 0, "x")
    sim.run()
    kinds = [(t, k) for t, k, _ in inbox]
    assert kinds[0] == (ms_to_ns(2), Kind.META_PENDING)
    # register sent at 10 ms, arrives at 11, applied 150 us later, reply takes 1 ms
    assert kinds[1] == (ms_to_ns(10) + ms_to_ns(1) + 150_000 + ms_to_ns(1), Kind.META_REPLY)
    assert inbox[1][2]["source"] == 0


def test_closed_execution_refuses_queries_and_registrations():
    sim, fab, svc, inbox = _service()
    svc.drop_execution("ex")
    _register(fab, 0, "x")
    _query(fab, 1, "x")
    sim.run()
    assert svc.directory.lookup(DataId("ex", "x")) is None
    assert [k for _, k, _ in inbox] == [Kind.META_ABORT]


def run_interleaving(seed: int, ids: int = 4, readers: int = 3) -> dict:
    """Random order of queries and registrations over a few ids."""
    rng = random.Random(seed)
    d = Directory()
    ops = [("q", i, r) for i in range(ids) for r in range(readers)] + [("r", i, None) for i in range(ids)]
    rng.shuffle(ops)
    registered: set[int] = set()
    replies: dict[tuple[int, int], int] = {}
    early = 0
    for op, i, r in ops:
        data_id = DataId("ex", f"k{i}")
        if op == "r":
            registered.add(i)
            d.register(data_id, 8, rng.randrange(3))
        else:
            def reply(view, i=i, r=r):
                nonlocal early
                if i not in registered:
                    early += 1
                replies[(i, r)] = replies.get((i, r), 0) + 1
            d.query(data_id, reply)
    return {
        "lost": ids * readers - len(replies),
        "duplicate": sum(1 for v in replies.values() if v != 1),
        "early": early,
        "parked": d.parked(),
    }


@pytest.mark.parametrize("seed", range(50))
def test_interleavings_sound(seed):
    assert run_interleaving(seed) == {"lost": 0, "duplicate": 0, "early": 0, "parked": 0}


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 6), st.integers(0, 40), st.data())
def test_replica_balance(k, n, data):
    d = Directory()
    for node in range(k):
        d.register(X, 1, node)
    for _ in range(n):
        before = d.lookup(X).access_frequency
        got = []
        d.query(X, got.append)
        assert before[got[0].source] == min(before.values())
    freq = d.lookup(X).access_frequency
    assert max(freq.values()) - min(freq.values()) <= 1
    assert sorted(freq.values()) == sorted(_greedy_counts(k, n))
