import logging

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from wfsim.simcore import Simulator, ms_to_ns, transfer_ns
from wfsim.transport import MASTER, Envelope, Fabric, FrameDecoder, Kind, NodeDown, decode_chunk, encode_chunk

MiB = 1 << 20
CHUNK = 64 * 1024


def _fabric(nodes=(0, 1, 2), **kw):
    sim = Simulator()
    fab = Fabric(sim, nodes, **kw)
    inbox = []
    for n in list(nodes) + [MASTER]:
        fab.attach(n, lambda env, n=n: inbox.append((sim.now, env)))
    return sim, fab, inbox


def _finish_times(fab):
    return {e.detail["data"]: e.t for e in fab.trace.select("TransferDone")}


def test_control_latency_exact():
    sim, fab, inbox = _fabric(latency_ns=ms_to_ns(1))
    sim.schedule(ms_to_ns(3), fab.send, Envelope.control(0, 1, Kind.INVOKE, "ex", function="A"))
    sim.run()
    (t, env), = inbox
    assert t == ms_to_ns(4)
    assert env.fields() == {"function": "A"}


def test_same_node_is_free():
    sim, fab, inbox = _fabric(latency_ns=ms_to_ns(5))
    fab.send(Envelope.control(1, 1, Kind.INVOKE, "ex"))
    sim.run()
    assert inbox[0][0] == 0


def test_ten_mib_at_25mb():
    sim, fab, inbox = _fabric()
    fab.set_bandwidth(1, 25e6, "ingress")
    fab.stream(0, 1, "ex", "d", bytes(10 * MiB))
    sim.run()
    # 160 chunks of 64 KiB; 65536 / 25e6 s is an integer number of ns
    assert _finish_times(fab)["d"] == 160 * transfer_ns(CHUNK, 25_000_000) == 419_430_400


def test_one_mib_at_50mb():
    sim, fab, _ = _fabric()
    fab.set_bandwidth(1, 50e6, "ingress")
    fab.stream(0, 1, "ex", "d", bytes(MiB))
    sim.run()
    assert _finish_times(fab)["d"] == pytest.approx(MiB / 50e6 * 1e9, abs=1)


def test_latency_added_after_shaping():
    sim, fab, _ = _fabric(latency_ns=ms_to_ns(2))
    fab.set_bandwidth(1, 50e6, "ingress")
    fab.stream(0, 1, "ex", "d", bytes(MiB))
    sim.run()
    assert _finish_times(fab)["d"] == 16 * transfer_ns(CHUNK, 50_000_000) + ms_to_ns(2)


def test_fair_share_into_one_ingress():
    sim, fab, _ = _fabric()
    fab.set_bandwidth(2, 50e6, "ingress")
    fab.stream(0, 2, "ex", "x", bytes(MiB))
    fab.stream(1, 2, "ex", "y", bytes(MiB))
    sim.run()
    chunk_t = transfer_ns(CHUNK, 50_000_000)
    done = _finish_times(fab)
    for key in ("x", "y"):
        effective = MiB / (done[key] / 1e9)
        assert effective == pytest.approx(25e6, rel=0.05)
        assert abs(done[key] - 2 * MiB / 50e6 * 1e9) <= chunk_t


def test_halving_mid_transfer():
    sim, fab, _ = _fabric()
    fab.set_bandwidth(1, 50e6, "ingress")
    fab.stream(0, 1, "ex", "d", bytes(MiB))
    sim.schedule(ms_to_ns(10), fab.set_bandwidth, 1, 25e6, "ingress")
    sim.run()
    # piecewise: 50 MB/s for 10 ms, the rest at 25 MB/s
    sent_early = 50e6 * 0.010
    expected = (0.010 + (MiB - sent_early) / 25e6) * 1e9
    assert abs(_finish_times(fab)["d"] - expected) <= transfer_ns(CHUNK, 25_000_000)


def test_unknown_target_warns(caplog):
    sim, fab, _ = _fabric()
    with caplog.at_level(logging.WARNING):
        fab.set_bandwidth(42, 1e6)
        fab.set_bandwidth((0, 42), 1e6)
    assert len(fab.trace.select("Warning")) == 2
    assert not fab.ports
    with pytest.raises(ValueError):
        fab.set_bandwidth(0, 0)


def test_node_throttle_covers_incident_links():
    sim, fab, _ = _fabric()
    fab.set_bandwidth(1, 25e6, "both")
    fab.stream(1, 0, "ex", "out", bytes(MiB))
    fab.stream(2, 1, "ex", "in", bytes(MiB))
    fab.stream(0, 2, "ex", "free", bytes(MiB))
    sim.run()
    done = _finish_times(fab)
    assert done["free"] == 0
    assert done["out"] == done["in"] == 16 * transfer_ns(CHUNK, 25_000_000)


def test_link_throttle_only_that_link():
    sim, fab, _ = _fabric()
    fab.set_bandwidth((0, 1), 25e6)
    fab.stream(0, 1, "ex", "a", bytes(MiB))
    fab.stream(0, 2, "ex", "b", bytes(MiB))
    sim.run()
    done = _finish_times(fab)
    assert done["b"] == 0 and done["a"] > 0


def test_stream_to_down_node_and_abort_on_failure():
    sim, fab, _ = _fabric()
    fab.set_bandwidth(1, 1e6)
    aborted = []
    fab.stream(0, 1, "ex", "d", bytes(MiB), on_abort=aborted.append)
    sim.schedule(ms_to_ns(5), fab.fail, 1)
    sim.run()
    assert len(aborted) == 1 and isinstance(aborted[0], NodeDown)
    assert not fab.trace.select("TransferDone")
    with pytest.raises(NodeDown):
        fab.stream(0, 1, "ex", "d2", b"x")
    with pytest.raises(NodeDown):
        fab.send(Envelope.control(1, 0, Kind.INVOKE, "ex"))


def test_empty_buffer_still_delivers_last_chunk():
    sim, fab, inbox = _fabric()
    fab.stream(0, 1, "ex", "d", b"")
    sim.run()
    (_, env), = inbox
    assert decode_chunk(env.payload) == ("d", 0, b"", True)


def test_codec_round_trip():
    envs = [
        Envelope.control(0, MASTER, Kind.QUERY_META, "wf-1", execution="wf-1", key="k"),
        Envelope(3, 1, Kind.CHUNK, "", encode_chunk("wf\x1fk", 65536, b"\x00\xff" * 10, True)),
    ]
    stream = b"".join(e.encode() for e in envs)
    dec = FrameDecoder()
    out = []
    for i in range(0, len(stream), 7):  # arbitrary split points
        out += dec.feed(stream[i:i + 7])
    assert out == envs
    assert decode_chunk(out[1].payload) == ("wf\x1fk", 65536, b"\x00\xff" * 10, True)


@settings(max_examples=60, deadline=None)
@given(
    sizes=st.lists(st.integers(0, 300_000), min_size=1, max_size=5),
    rate=st.integers(1_000_000, 100_000_000),
    chunk=st.sampled_from([1000, 4096, 65536]),
)
def test_conservation_and_fifo(sizes, rate, chunk):
    sim = Simulator()
    fab = Fabric(sim, [0, 1, 2], chunk_size=chunk)
    received = {}
    ok = []

    def sink(env):
        data_id, off, data, last = decode_chunk(env.payload)
        buf = received.setdefault(data_id, bytearray())
        assert off == len(buf)  # in-order per stream
        buf += data
        if last:
            ok.append(data_id)

    fab.attach(2, sink)
    fab.set_bandwidth(2, rate, "ingress")
    payloads = {f"d{i}": bytes([i]) * n for i, n in enumerate(sizes)}
    for i, (k, v) in enumerate(payloads.items()):
        fab.stream(i % 2, 2, "ex", k, v)
    sim.run()
    assert sorted(ok) == sorted(payloads)
    assert {k: bytes(v) for k, v in received.items()} == payloads
    assert sum(fab.bytes_by_link.values()) == sum(sizes)


@settings(max_examples=60, deadline=None)
@given(
    rate=st.integers(1_000_000, 80_000_000),
    nbytes=st.integers(2 * CHUNK, 40 * CHUNK),
    frac=st.tuples(st.floats(0, 1), st.floats(0, 1)),
)
def test_shaping_window(rate, nbytes, frac):
    sim = Simulator()
    fab = Fabric(sim, [0, 1], trace_chunks=True)
    fab.attach(1, lambda env: None)
    fab.set_bandwidth(1, rate, "ingress")
    fab.stream(0, 1, "ex", "d", bytes(nbytes))
    sim.run()
    chunks = fab.trace.select("Chunk")
    end = chunks[-1].t
    a, b = sorted(int(f * end) for f in frac)
    delivered = sum(e.detail["bytes"] for e in chunks if a < e.t <= b)
    ideal = rate * (b - a) / 1e9
    assert ideal - CHUNK <= delivered <= ideal + CHUNK
