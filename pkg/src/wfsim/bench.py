"""Experiment driver: load generation, reports, comparisons and timelines."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import math
import re
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .engine import BandwidthSetting, ConfigError, Engine, EngineConfig, ExecutionHandle
from .simcore import NS_PER_MS, NS_PER_S
from .trace import ExecutionTrace
from .transport import MASTER
from .workflow import WorkflowSpec, load_workflow, synthesize_workflow


@dataclass(frozen=True)
class LoadSpec:
    kind: str  # "open" | "closed"
    rate_per_min: float = 0.0
    duration_s: float = 0.0
    clients: int = 0
    iterations: int = 0

    def __post_init__(self):
        if self.kind == "open":
            if self.rate_per_min <= 0 or self.duration_s <= 0:
                raise ConfigError("open load needs rate > 0 and duration > 0")
        elif self.kind == "closed":
            if self.clients < 1 or self.iterations < 1:
                raise ConfigError("closed load needs clients >= 1 and iterations >= 1")
        else:
            raise ConfigError(f"unknown load kind {self.kind!r}")

    @property
    def invocations(self) -> int:
        if self.kind == "open":
            return int(math.floor(self.rate_per_min * self.duration_s / 60.0 + 1e-9))
        return self.clients * self.iterations

    def __str__(self) -> str:
        if self.kind == "open":
            return f"open:{self.rate_per_min:g}/min:{self.duration_s:g}s"
        return f"closed:{self.clients}:{self.iterations}"


_DURATION = re.compile(r"^\s*([0-9.]+)\s*(ms|s|m|min|h)?\s*$")


def parse_duration(text: str) -> float:
    """``"90"``/``"90s"`` -> 90.0, ``"10m"`` -> 600.0, ``"1h"`` -> 3600.0 (seconds)."""
    m = _DURATION.match(text)
    if not m:
        raise ConfigError(f"bad duration {text!r}")
    scale = {None: 1.0, "s": 1.0, "ms": 1e-3, "m": 60.0, "min": 60.0, "h": 3600.0}[m.group(2)]
    return float(m.group(1)) * scale


def parse_load(text: str) -> LoadSpec:
    """Parse ``open:RATE/min:DURATION`` or ``closed:CLIENTS:ITERS``."""
    parts = text.strip().split(":")
    try:
        if parts[0] == "open" and len(parts) == 3:
            rate = parts[1].removesuffix("/min")
            return LoadSpec("open", rate_per_min=float(rate), duration_s=parse_duration(parts[2]))
        if parts[0] == "closed" and len(parts) == 3:
            return LoadSpec("closed", clients=int(parts[1]), iterations=int(parts[2]))
    except ValueError as exc:
        raise ConfigError(f"bad load {text!r}: {exc}") from None
    raise ConfigError(f"bad load {text!r}; expected open:RATE/min:DURATION or closed:CLIENTS:ITERS")


_RATE = re.compile(r"^\s*([0-9.]+)\s*([kKmMgG]?)(i?)[bB]?(?:/s|ps)?\s*$")


def parse_rate(text: str) -> float:
    """``"25MB/s"`` -> 25e6, ``"1MiB/s"`` -> 1048576, ``"5e7"`` -> 5e7 (bytes/s)."""
    try:
        return float(text)
    except ValueError:
        pass
    m = _RATE.match(text)
    if not m:
        raise ConfigError(f"bad rate {text!r}")
    exp = " KMG".index(m.group(2).upper() or " ")
    base = 1024 if m.group(3) else 1000
    return float(m.group(1)) * base ** exp


def parse_bandwidth(text: str) -> BandwidthSetting:
    """``RATE[@scope]`` where scope is ``ingress``, ``egress`` or ``both``.

    A ``target=`` prefix restricts the throttle to ``master``, ``workers``,
    a node id or a ``SRC-DST`` link, e.g. ``master=25MB/s@egress``.
    """
    target = "all"
    if "=" in text:
        target, text = text.split("=", 1)
        if target not in ("all", "master", "workers"):
            if "-" in target[1:]:
                src, dst = target.split("-", 1)
                target = (int(src), int(dst))
            else:
                target = int(target)
    rate, _, scope = text.partition("@")
    scope = scope or "ingress"
    if scope not in ("ingress", "egress", "both"):
        raise ConfigError(f"bad bandwidth scope {scope!r}")
    if isinstance(target, tuple):
        scope = "link"
    return BandwidthSetting(target, parse_rate(rate), scope)


@dataclass
class ExperimentConfig:
    """One benchmark run.

    ``workflow`` is a file path; otherwise ``shape`` is handed to
    :func:`synthesize_workflow` with the ``compute_ms``/``output_bytes``/
    ``coldstart_ms`` parameters.  ``engine`` holds extra :class:`EngineConfig`
    overrides (latency, pool size, ...).
    """

    workflow: str | None = None
    shape: str | None = "diamond"
    compute_ms: object = 100.0
    output_bytes: object = 1_000_000
    coldstart_ms: object = 500.0
    nodes: int = 2
    policy: str = "dataflow"
    store: str | None = None
    bandwidth: list[BandwidthSetting] = field(default_factory=list)
    load: LoadSpec = field(default_factory=lambda: LoadSpec("closed", clients=1, iterations=2))
    seed: int = 0
    time_mode: str = "virtual"
    transport: str = "sim"
    engine: dict = field(default_factory=dict)

    def build_spec(self) -> WorkflowSpec:
        if self.workflow:
            return load_workflow(self.workflow)
        if not self.shape:
            raise ConfigError("need a workflow file or a shape")
        return synthesize_workflow(self.shape, compute_ms=self.compute_ms, output_bytes=self.output_bytes,
                                   coldstart_ms=self.coldstart_ms, seed=self.seed)

    def engine_config(self) -> EngineConfig:
        opts = {"free_on_complete": True}
        opts.update(self.engine)
        return EngineConfig(nodes=self.nodes, policy=self.policy, store=self.store,
                            bandwidth=list(self.bandwidth), time_mode=self.time_mode,
                            transport=self.transport, **opts)


def nearest_rank(values: Sequence[float], pct: float) -> float | None:
    """Nearest-rank percentile: the smallest value with at least ``pct``% at or below it."""
    if not values:
        return None
    ordered = sorted(values)
    rank = max(1, math.ceil(pct / 100.0 * len(ordered)))
    return ordered[rank - 1]


@dataclass
class Report:
    workflow: str
    policy: str
    store: str
    nodes: int
    seed: int
    load: str
    invocations: int
    latencies_ms: list[float]
    p50_ms: float | None
    p95_ms: float | None
    p99_ms: float | None
    mean_ms: float | None
    throughput_per_min: float
    completed: int
    timeouts: int
    failures: int
    restarts: int
    cold_start_delta_ms: float | None
    bytes_by_link: dict[str, int]
    timeout_ms: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def _link_name(node: int) -> str:
    return "master" if node == MASTER else str(node)


def build_report(engine: Engine, handles: Sequence[ExecutionHandle], cfg: ExperimentConfig,
                 workflow: str) -> Report:
    """Summarize finished executions; unfinished ones count as timeouts."""
    bound_ms = engine.timeout_ns / NS_PER_MS
    lat = []
    for h in handles:
        if h.status == "completed":
            lat.append(h.latency_ns / NS_PER_MS)
        elif h.status == "failed" and h.latency_ns is not None:
            lat.append(min(h.latency_ns / NS_PER_MS, bound_ms))
        else:
            lat.append(bound_ms)
    done = [h for h in handles if h.status == "completed"]
    if done:
        span = max(h.completed_at for h in done) - min(h.submitted_at for h in handles)
        throughput = len(done) / (span / NS_PER_S / 60.0) if span > 0 else 0.0
    else:
        throughput = 0.0
    links = {
        f"{_link_name(s)}->{_link_name(d)}": n
        for (s, d), n in sorted(engine.fabric.bytes_by_link.items())
    }
    return Report(
        workflow=workflow,
        policy=engine.config.policy,
        store=engine.config.store,
        nodes=engine.config.nodes,
        seed=cfg.seed,
        load=str(cfg.load),
        invocations=len(handles),
        latencies_ms=lat,
        p50_ms=nearest_rank(lat, 50),
        p95_ms=nearest_rank(lat, 95),
        p99_ms=nearest_rank(lat, 99),
        mean_ms=sum(lat) / len(lat) if lat else None,
        throughput_per_min=throughput,
        completed=len(done),
        timeouts=sum(1 for h in handles if h.status in ("timeout", "pending", "running")),
        failures=sum(1 for h in handles if h.status == "failed"),
        restarts=sum(h.attempt for h in handles),
        cold_start_delta_ms=lat[0] - lat[1] if len(lat) >= 2 else None,
        bytes_by_link=links,
        timeout_ms=bound_ms,
    )


def invocation_seed(seed: int, index: int) -> int:
    h = hashlib.blake2b(f"{seed}:{index}".encode(), digest_size=4)
    return int.from_bytes(h.digest(), "little")


def drive_load(engine: Engine, workflow: str, load: LoadSpec, seed: int) -> list[ExecutionHandle]:
    """Schedule the submissions of ``load``; returns handles in issue order."""
    handles: list[ExecutionHandle] = []
    if load.kind == "open":
        gap = 60.0 / load.rate_per_min
        for i in range(load.invocations):
            at = int(round(i * gap * NS_PER_S))
            handles.append(engine.submit(workflow, f"{workflow}-{i:05d}", invocation_seed(seed, i), at=at))
        return handles

    counter = iter(range(load.invocations))
    remaining = {c: load.iterations for c in range(load.clients)}
    owner: dict[str, int] = {}

    def issue(client: int) -> None:
        i = next(counter)
        h = engine.submit(workflow, f"{workflow}-{i:05d}", invocation_seed(seed, i))
        owner[h.name] = client
        remaining[client] -= 1
        handles.append(h)

    def done(h: ExecutionHandle) -> None:
        client = owner.get(h.name)
        if client is not None and remaining[client] > 0:
            issue(client)

    engine.listeners.append(done)
    for c in range(load.clients):
        issue(c)
    return handles


def run_experiment(cfg: ExperimentConfig, out_dir: str | Path | None = None) -> tuple[Report, Engine]:
    """Run ``cfg`` and optionally write report.json, trace.ndjson and timeline.csv."""
    spec = cfg.build_spec()
    engine = Engine(cfg.engine_config())
    handles: list[ExecutionHandle] = []
    try:
        engine.register(spec)
        handles = drive_load(engine, spec.name, cfg.load, cfg.seed)
        engine.run()
    except KeyboardInterrupt:
        report = build_report(engine, handles, cfg, spec.name)
        if out_dir is not None:
            write_outputs(out_dir, report, engine.trace)
        raise
    finally:
        engine.close()
    report = build_report(engine, handles, cfg, spec.name)
    if out_dir is not None:
        write_outputs(out_dir, report, engine.trace)
    return report, engine


def write_outputs(out_dir: str | Path, report: Report, trace: ExecutionTrace) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(report.to_json())
    (out / "trace.ndjson").write_text(trace.to_ndjson())
    (out / "timeline.csv").write_text(emit_timeline(trace))


# -- comparisons ---------------------------------------------------------------


@dataclass
class ComparisonRow:
    label: str
    policy: str
    store: str
    p50_ms: float | None
    p99_ms: float | None
    throughput_per_min: float
    timeouts: int
    p99_delta_pct: float | None


@dataclass
class Comparison:
    seed: int
    rows: list[ComparisonRow]
    reports: list[Report]

    def to_text(self) -> str:
        lines = [f"shared seed: {self.seed}",
                 f"{'variant':<24}{'p50 ms':>12}{'p99 ms':>12}{'wf/min':>10}{'timeouts':>10}{'p99 vs first':>14}"]
        for r in self.rows:
            delta = "" if r.p99_delta_pct is None else f"{r.p99_delta_pct:+.1f}%"
            lines.append(f"{r.label:<24}{r.p50_ms or 0:>12.1f}{r.p99_ms or 0:>12.1f}"
                         f"{r.throughput_per_min:>10.2f}{r.timeouts:>10}{delta:>14}")
        return "\n".join(lines) + "\n"


def split_variant(variant: str) -> tuple[str, str | None]:
    policy, _, store = variant.partition("+")
    return policy, store or None


def compare(variants: Iterable[str], cfg: ExperimentConfig) -> Comparison:
    """Run ``cfg`` once per ``policy[+store]`` variant with the same workload seed."""
    variants = list(variants)
    if len(variants) < 2:
        raise ConfigError("compare needs at least two policies")
    reports = []
    for v in variants:
        policy, store = split_variant(v)
        run_cfg = ExperimentConfig(**{**asdict_shallow(cfg), "policy": policy, "store": store})
        reports.append(run_experiment(run_cfg)[0])
    base = reports[0].p99_ms
    rows = [
        ComparisonRow(
            label=v, policy=r.policy, store=r.store, p50_ms=r.p50_ms, p99_ms=r.p99_ms,
            throughput_per_min=r.throughput_per_min, timeouts=r.timeouts,
            p99_delta_pct=None if not base or r.p99_ms is None else 100.0 * (r.p99_ms - base) / base,
        )
        for v, r in zip(variants, reports)
    ]
    return Comparison(cfg.seed, rows, reports)


def asdict_shallow(cfg: ExperimentConfig) -> dict:
    return {f: getattr(cfg, f) for f in cfg.__dataclass_fields__}


# -- timelines -------------------------------------------------------------------

TIMELINE_EVENTS = {
    "Invoked": "invoked",
    "BodyStarted": "started",
    "Block": "blocked",
    "Wake": "woken",
    "Completed": "completed",
}
TIMELINE_FIELDS = ("execution", "function", "node", "mark", "t_ms")


def timeline_rows(trace: ExecutionTrace) -> list[tuple[str, str, int, str, str]]:
    return [
        (e.execution, e.function, e.node, TIMELINE_EVENTS[e.event], f"{e.t / NS_PER_MS:.3f}")
        for e in trace
        if e.event in TIMELINE_EVENTS and e.function is not None
    ]


def emit_timeline(trace: ExecutionTrace) -> str:
    """CSV with one row per invoked/started/blocked/woken/completed mark."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    rows = timeline_rows(trace)
    if rows:
        w.writerow(TIMELINE_FIELDS)
        w.writerows(rows)
    return buf.getvalue()


def parse_timeline(text: str) -> list[tuple[str, str, int, str, str]]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader, None)
    if header is None:
        return []
    if tuple(header) != TIMELINE_FIELDS:
        raise ValueError(f"unexpected timeline header {header}")
    return [(r[0], r[1], int(r[2]), r[3], r[4]) for r in reader]


def render_timeline(trace: ExecutionTrace, execution: str | None = None) -> str:
    """Text table: one row per function with its marks in milliseconds."""
    marks: dict[tuple[str, str], dict[str, str]] = {}
    for ex, fn, node, mark, t in timeline_rows(trace):
        if execution is not None and ex != execution:
            continue
        row = marks.setdefault((ex, fn), {"node": str(node)})
        row.setdefault(mark, t)
    if not marks:
        return ""
    cols = ["invoked", "started", "blocked", "woken", "completed"]
    lines = [f"{'execution':<22}{'function':<12}{'node':>5}" + "".join(f"{c:>12}" for c in cols)]
    for (ex, fn), row in marks.items():
        lines.append(f"{ex:<22}{fn:<12}{row['node']:>5}" + "".join(f"{row.get(c, '-'):>12}" for c in cols))
    return "\n".join(lines) + "\n"
