import random

from wfsim.central import CentralStore
from wfsim.dstore import DataId, MissingData
from wfsim.engine import BandwidthSetting, EngineConfig, run_once
from wfsim.partition import Placement
from wfsim.simcore import Simulator, ms_to_ns, transfer_ns
from wfsim.transport import MASTER, Fabric
from wfsim.workflow import synthesize_workflow

from workloads import diamond, five_step

FREE = dict(latency_ms=0.0, metadata_write_us=0.0)


def _times(trace, event):
    return {e.function: e.t for e in trace.select(event) if e.function}


def test_five_step_timing():
    engine, h = run_once(five_step(), EngineConfig(nodes=1, policy="cflow", **FREE))
    start = _times(engine.trace, "BodyStarted")
    assert start["D"] == ms_to_ns(2000)
    assert start["E"] == ms_to_ns(3000)
    assert engine.config.store == "central"


def test_every_edge_goes_through_master():
    spec = diamond()
    place = Placement({"A": 0, "B": 0, "C": 1, "D": 1}, 2)
    engine, h = run_once(spec, EngineConfig(nodes=2, policy="cflow", latency_ms=1.0), placement=place)
    starts = [(e.detail["data"].split("\x1f")[-1], e.detail["src"], e.detail["dst"])
              for e in engine.trace.select("TransferStart")]
    ups = {(k, s) for k, s, d in starts if d == MASTER}
    downs = {(k, d) for k, s, d in starts if s == MASTER}
    assert ups == {("x", 0), ("y", 0), ("z", 1), ("out", 1)}
    assert downs == {("x", 0), ("x", 1), ("y", 1), ("z", 1)}
    assert not engine.trace.select("Block")


def _fluid_drain(arrivals, rate):
    """Work-conserving single server: time the last byte of ``[(t, bytes)]`` is through."""
    return max(t + sum(b for t2, b in arrivals if t2 >= t) / rate * 1e9 for t, _ in arrivals)


def test_fan_in_master_ingress_bound():
    size = 4_000_000
    compute = [200.0 + 50 * i for i in range(8)] + [10.0]
    spec = synthesize_workflow("fan_in:8", compute_ms=compute, output_bytes=size)
    place = Placement({**{f"p{i}": i % 4 for i in range(8)}, "sink": 0}, 4)
    cfg = EngineConfig(nodes=4, policy="cflow", latency_ms=1.0,
                       bandwidth=[BandwidthSetting("master", 50e6, "ingress")])
    engine, h = run_once(spec, cfg, placement=place)
    tr = engine.trace
    arrivals = [(e.t, size) for e in tr.select("CentralPutStart") if e.function != "sink"]
    bound = _fluid_drain(arrivals, 50e6)
    start = _times(tr, "BodyStarted")["sink"]
    assert start >= bound - transfer_ns(64 * 1024, 50_000_000)
    assert h.status == "completed"


def test_round_trip_and_missing():
    sim = Simulator()
    fab = Fabric(sim, [0, 1], latency_ns=1000)
    cs = CentralStore(sim, fab, [0, 1])
    x = DataId("ex", "x")
    payload = bytes(range(256)) * 700
    done = cs.put(0, x, payload)
    sim.run()
    assert done.done and cs.holds(x)
    got = cs.get(1, x)
    miss = cs.get(1, DataId("ex", "nope"))
    sim.run()
    assert got.result() == payload
    assert isinstance(miss.error(), MissingData)
    assert cs.missing_reads == 1


def test_chain_leaves_all_entries():
    n = 6
    spec = synthesize_workflow(f"chain:{n}", compute_ms=5.0, output_bytes=100)
    engine, h = run_once(spec, EngineConfig(nodes=3, policy="cflow", latency_ms=0.5))
    assert len(engine.store.entries) == n


def test_never_reads_missing_data():
    for seed in range(1000):
        rng = random.Random(seed)
        spec = synthesize_workflow(f"random:{rng.randint(1, 7)}:0.4:{seed}", compute_ms=(1.0, 20.0),
                                   output_bytes=(0, 2000), seed=seed)
        engine, h = run_once(spec, EngineConfig(nodes=rng.randint(1, 3), policy="cflow",
                                                latency_ms=rng.uniform(0, 2)), seed=seed)
        assert h.status == "completed"
        assert engine.store.missing_reads == 0
        assert not engine.trace.select(("MissingData", "Block"))
