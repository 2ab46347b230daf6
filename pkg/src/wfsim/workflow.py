"""Workflow data model, workflow-file parsing and synthetic DAG generators.

A workflow file is YAML::

    name: fig3
    external_inputs: []
    functions:
      - name: A
        inputs: []
        outputs: [a]
        compute_ms: 1000
        output_bytes: 1024
        coldstart_ms: 0
      - name: D
        inputs: [a, b, c]
        outputs: [d]
        compute_ms: 1000

Edges are inferred by matching output keys to input keys.  A function may
carry ``foreach: k``; it is expanded into ``k`` parallel copies named
``<name>_<i>`` and every ``{i}`` in its key templates is replaced by the copy
index.  A plain consumer that lists ``key_{i}`` gathers all ``k`` copies.
"""
from __future__ import annotations

import random
import re
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

import yaml

__all__ = [
    "FunctionDef",
    "Edge",
    "WorkflowSpec",
    "DagView",
    "WorkflowError",
    "WorkflowSyntaxError",
    "CycleError",
    "DanglingKeyError",
    "DuplicateNameError",
    "InvalidShape",
    "parse_workflow",
    "load_workflow",
    "dump_workflow",
    "build_dag_view",
    "synthesize_workflow",
    "BENCH_SHAPES",
]

_INDEX = "{i}"


class WorkflowError(ValueError):
    """Base class for workflow definition problems."""


class WorkflowSyntaxError(WorkflowError):
    """The workflow document is malformed."""


class CycleError(WorkflowError):
    def __init__(self, cycle: Sequence[str]):
        self.cycle = list(cycle)
        super().__init__("workflow has a cycle: " + "->".join(self.cycle))


class DanglingKeyError(WorkflowError):
    def __init__(self, function: str, key: str):
        self.function = function
        self.key = key
        super().__init__(
            f"input {key!r} of {function!r} has no producer and is not an external input"
        )


class DuplicateNameError(WorkflowError):
    pass


class InvalidShape(WorkflowError):
    pass


@dataclass(frozen=True)
class FunctionDef:
    name: str
    inputs: tuple[str, ...] = ()
    outputs: tuple[str, ...] = ()
    compute_millis: float = 0.0
    output_bytes: int = 0
    coldstart_millis: float = 0.0

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise WorkflowSyntaxError("function name must be a non-empty string")
        for label, value in (
            ("compute_ms", self.compute_millis),
            ("output_bytes", self.output_bytes),
            ("coldstart_ms", self.coldstart_millis),
        ):
            if isinstance(value, bool) or not isinstance(value, (int, float)) or value < 0:
                raise WorkflowSyntaxError(f"{self.name}: {label} must be a number >= 0")
        if len(set(self.outputs)) != len(self.outputs):
            raise DuplicateNameError(f"{self.name}: repeated output key")


@dataclass(frozen=True)
class Edge:
    source: str
    dest: str
    key: str


@dataclass(frozen=True)
class WorkflowSpec:
    """A validated workflow DAG.  Build with :meth:`build`, not the constructor."""

    name: str
    functions: tuple[FunctionDef, ...]
    edges: tuple[Edge, ...]
    entry_points: tuple[str, ...]
    external_inputs: tuple[str, ...] = ()
    external_input_bytes: int = 0
    _by_name: Mapping[str, FunctionDef] = field(
        default=None, compare=False, repr=False, hash=False
    )
    _producer: Mapping[str, str] = field(default=None, compare=False, repr=False, hash=False)

    @classmethod
    def build(
        cls,
        name: str,
        functions: Iterable[FunctionDef],
        external_inputs: Iterable[str] = (),
        external_input_bytes: int = 0,
    ) -> "WorkflowSpec":
        functions = tuple(functions)
        external = tuple(external_inputs)
        by_name: dict[str, FunctionDef] = {}
        for fn in functions:
            if fn.name in by_name:
                raise DuplicateNameError(f"duplicate function name {fn.name!r}")
            by_name[fn.name] = fn

        producer: dict[str, str] = {}
        for fn in functions:
            for key in fn.outputs:
                if key in producer:
                    raise DuplicateNameError(
                        f"key {key!r} produced by both {producer[key]!r} and {fn.name!r}"
                    )
                if key in external:
                    raise DuplicateNameError(f"key {key!r} is both produced and external")
                producer[key] = fn.name

        edges = []
        for fn in functions:
            for key in fn.inputs:
                if key in producer:
                    edges.append(Edge(producer[key], fn.name, key))
                elif key not in external:
                    raise DanglingKeyError(fn.name, key)

        order = {fn.name: i for i, fn in enumerate(functions)}
        succ: dict[str, list[str]] = {fn.name: [] for fn in functions}
        has_pred = set()
        for e in edges:
            if e.dest not in succ[e.source]:
                succ[e.source].append(e.dest)
            has_pred.add(e.dest)
        for s in succ.values():
            s.sort(key=order.__getitem__)
        cycle = _find_cycle([fn.name for fn in functions], succ)
        if cycle:
            raise CycleError(cycle)

        entry = tuple(fn.name for fn in functions if fn.name not in has_pred)
        spec = cls(
            name=str(name),
            functions=functions,
            edges=tuple(edges),
            entry_points=entry,
            external_inputs=external,
            external_input_bytes=int(external_input_bytes),
        )
        object.__setattr__(spec, "_by_name", by_name)
        object.__setattr__(spec, "_producer", producer)
        return spec

    def function(self, name: str) -> FunctionDef:
        return self._by_name[name]

    @property
    def names(self) -> list[str]:
        return [fn.name for fn in self.functions]

    def producer_of(self, key: str) -> str | None:
        return self._producer.get(key)

    def edge_bytes(self, edge: Edge) -> int:
        return self._by_name[edge.source].output_bytes


def _find_cycle(names: list[str], succ: Mapping[str, list[str]]) -> list[str] | None:
    white, grey, black = 0, 1, 2
    color = dict.fromkeys(names, white)
    for root in names:
        if color[root] != white:
            continue
        path = [root]
        stack = [iter(succ[root])]
        color[root] = grey
        while stack:
            nxt = next(stack[-1], None)
            if nxt is None:
                stack.pop()
                color[path.pop()] = black
                continue
            if color[nxt] == grey:
                return path[path.index(nxt):] + [nxt]
            if color[nxt] == white:
                color[nxt] = grey
                path.append(nxt)
                stack.append(iter(succ[nxt]))
    return None


@dataclass(frozen=True)
class DagView:
    successors: Mapping[str, tuple[str, ...]]
    predecessors: Mapping[str, tuple[str, ...]]
    topo_order: tuple[str, ...]

    def descendants_at(self, name: str, depth: int) -> list[str]:
        """Functions reachable from ``name`` by a path of exactly ``depth`` edges."""
        frontier = [name]
        for _ in range(depth):
            nxt: list[str] = []
            for f in frontier:
                for s in self.successors[f]:
                    if s not in nxt:
                        nxt.append(s)
            frontier = nxt
        return frontier


def build_dag_view(spec: WorkflowSpec) -> DagView:
    order = {fn.name: i for i, fn in enumerate(spec.functions)}
    succ: dict[str, list[str]] = {n: [] for n in order}
    pred: dict[str, list[str]] = {n: [] for n in order}
    for e in spec.edges:
        if e.dest not in succ[e.source]:
            succ[e.source].append(e.dest)
        if e.source not in pred[e.dest]:
            pred[e.dest].append(e.source)
    for d in (succ, pred):
        for lst in d.values():
            lst.sort(key=order.__getitem__)

    # Kahn's algorithm, smallest file index first, so the order is stable.
    indeg = {n: len(pred[n]) for n in order}
    ready = [n for n in order if indeg[n] == 0]
    topo = []
    while ready:
        ready.sort(key=order.__getitem__)
        n = ready.pop(0)
        topo.append(n)
        for s in succ[n]:
            indeg[s] -= 1
            if indeg[s] == 0:
                ready.append(s)
    return DagView(
        successors={n: tuple(v) for n, v in succ.items()},
        predecessors={n: tuple(v) for n, v in pred.items()},
        topo_order=tuple(topo),
    )


# -- file format ---------------------------------------------------------


def _as_keys(value: Any, where: str) -> list[str]:
    if value is None:
        return []
    if not isinstance(value, list) or not all(isinstance(k, str) and k for k in value):
        raise WorkflowSyntaxError(f"{where} must be a list of non-empty strings")
    return list(value)


def parse_workflow(text: str | bytes) -> WorkflowSpec:
    """Parse a workflow document into a validated :class:`WorkflowSpec`."""
    if isinstance(text, bytes):
        try:
            text = text.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WorkflowSyntaxError(f"workflow file is not UTF-8: {exc}") from None
    try:
        doc = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise WorkflowSyntaxError(str(exc)) from None
    if not isinstance(doc, dict):
        raise WorkflowSyntaxError("workflow document must be a mapping")
    unknown = set(doc) - {"name", "external_inputs", "external_input_bytes", "functions"}
    if unknown:
        raise WorkflowSyntaxError(f"unknown top-level fields: {sorted(unknown)}")
    name = doc.get("name")
    if not isinstance(name, str) or not name:
        raise WorkflowSyntaxError("workflow needs a non-empty 'name'")
    external = _as_keys(doc.get("external_inputs"), "external_inputs")
    ext_bytes = doc.get("external_input_bytes", 0)
    if not isinstance(ext_bytes, int) or ext_bytes < 0:
        raise WorkflowSyntaxError("external_input_bytes must be an integer >= 0")
    entries = doc.get("functions") or []
    if not isinstance(entries, list):
        raise WorkflowSyntaxError("'functions' must be a list")

    raw = []
    for idx, entry in enumerate(entries):
        if not isinstance(entry, dict):
            raise WorkflowSyntaxError(f"functions[{idx}] must be a mapping")
        unknown = set(entry) - {
            "name", "inputs", "outputs", "compute_ms", "output_bytes", "coldstart_ms", "foreach"
        }
        if unknown:
            raise WorkflowSyntaxError(f"functions[{idx}]: unknown fields {sorted(unknown)}")
        fname = entry.get("name")
        if not isinstance(fname, str) or not fname:
            raise WorkflowSyntaxError(f"functions[{idx}] needs a non-empty 'name'")
        foreach = entry.get("foreach")
        if foreach is not None and (
            isinstance(foreach, bool) or not isinstance(foreach, int) or foreach < 1
        ):
            raise WorkflowSyntaxError(f"{fname}: foreach must be a positive integer")
        raw.append(
            dict(
                name=fname,
                inputs=_as_keys(entry.get("inputs"), f"{fname}.inputs"),
                outputs=_as_keys(entry.get("outputs"), f"{fname}.outputs"),
                compute_millis=entry.get("compute_ms", 0),
                output_bytes=entry.get("output_bytes", 0),
                coldstart_millis=entry.get("coldstart_ms", 0),
                foreach=foreach,
            )
        )
    functions = _expand_foreach(raw)
    return WorkflowSpec.build(name, functions, external, ext_bytes)


def _expand_foreach(raw: list[dict]) -> list[FunctionDef]:
    # template key -> fan width of the foreach function producing it
    width: dict[str, int] = {}
    for r in raw:
        if r["foreach"]:
            for key in r["outputs"]:
                if _INDEX not in key:
                    raise WorkflowSyntaxError(
                        f"{r['name']}: foreach outputs must contain {_INDEX}"
                    )
                width[key] = r["foreach"]

    out = []
    for r in raw:
        k = r["foreach"]
        if not k:
            inputs = []
            for key in r["inputs"]:
                if _INDEX in key:
                    if key not in width:
                        raise WorkflowSyntaxError(
                            f"{r['name']}: {key!r} is not produced by a foreach function"
                        )
                    inputs.extend(key.replace(_INDEX, str(i)) for i in range(width[key]))
                else:
                    inputs.append(key)
            out.append(_mkfn(r, r["name"], inputs, r["outputs"]))
            continue
        for i in range(k):
            inputs = []
            for key in r["inputs"]:
                if _INDEX in key and key in width and width[key] != k:
                    raise WorkflowSyntaxError(
                        f"{r['name']}: element-wise input {key!r} has width {width[key]}, not {k}"
                    )
                inputs.append(key.replace(_INDEX, str(i)))
            outputs = [key.replace(_INDEX, str(i)) for key in r["outputs"]]
            out.append(_mkfn(r, f"{r['name']}_{i}", inputs, outputs))
    return out


def _mkfn(r: dict, name: str, inputs: list[str], outputs: list[str]) -> FunctionDef:
    return FunctionDef(
        name=name,
        inputs=tuple(inputs),
        outputs=tuple(outputs),
        compute_millis=r["compute_millis"],
        output_bytes=r["output_bytes"],
        coldstart_millis=r["coldstart_millis"],
    )


def load_workflow(path) -> WorkflowSpec:
    with open(path, "rb") as fh:
        return parse_workflow(fh.read())


def dump_workflow(spec: WorkflowSpec) -> str:
    """Serialize an (already expanded) spec back to the workflow file format."""
    doc: dict[str, Any] = {"name": spec.name, "external_inputs": list(spec.external_inputs)}
    if spec.external_input_bytes:
        doc["external_input_bytes"] = spec.external_input_bytes
    doc["functions"] = [
        {
            "name": fn.name,
            "inputs": list(fn.inputs),
            "outputs": list(fn.outputs),
            "compute_ms": fn.compute_millis,
            "output_bytes": fn.output_bytes,
            "coldstart_ms": fn.coldstart_millis,
        }
        for fn in spec.functions
    ]
    return yaml.safe_dump(doc, sort_keys=False, default_flow_style=None)


# -- synthetic shapes ----------------------------------------------------

# Shape-equivalent stand-ins for the scientific and real-world benchmarks:
# layer widths, sparse fan-in, edge sizes drawn in [1 MB, 32 MB].
BENCH_SHAPES: dict[str, tuple[int, ...]] = {
    "cyc": (1, 8, 16, 8, 8, 1),
    "epi": (1, 10, 10, 10, 10, 1),
    "gen": (1, 12, 12, 12, 12, 2, 1),
    "soy": (1, 10, 10, 10, 10, 4, 1),
    "wc": (1, 8, 1),
    "fp": (1, 4, 4, 1),
}


def _per_function(value, count: int, label: str, rng: random.Random) -> list:
    if isinstance(value, tuple) and len(value) == 2:
        lo, hi = value
        if isinstance(lo, int) and isinstance(hi, int):
            return [rng.randint(lo, hi) for _ in range(count)]
        return [rng.uniform(lo, hi) for _ in range(count)]
    if isinstance(value, (list,)):
        if len(value) != count:
            raise InvalidShape(f"{label}: expected {count} values, got {len(value)}")
        return list(value)
    return [value] * count


def _letters(n: int) -> list[str]:
    if n <= 26:
        return [chr(ord("A") + i) for i in range(n)]
    return [f"f{i:03d}" for i in range(n)]


def _parse_shape(shape: str) -> tuple[str, list[str]]:
    parts = shape.strip().split(":")
    return parts[0].lower(), [p for p in parts[1:] if p != ""]


def synthesize_workflow(
    shape: str,
    *,
    compute_ms=100.0,
    output_bytes=1024,
    coldstart_ms=0.0,
    seed: int = 0,
    name: str | None = None,
) -> WorkflowSpec:
    """Generate a synthetic workflow.

    ``shape`` is one of ``chain:N``, ``fan_in:N``, ``fan_out:N``, ``diamond``,
    ``layered:W1,W2,...``, ``random:N:P:SEED`` or ``bench:NAME`` (see
    :data:`BENCH_SHAPES`).  ``compute_ms``, ``output_bytes`` and ``coldstart_ms``
    accept a scalar, a per-function list (in function order) or a ``(lo, hi)``
    range drawn with ``seed``.  Every function emits one output key that all
    of its successors consume.
    """
    kind, args = _parse_shape(shape)

    def int_arg(i: int) -> int:
        try:
            v = int(args[i])
        except (IndexError, ValueError):
            raise InvalidShape(f"{shape!r}: missing or bad integer argument") from None
        if v <= 0:
            raise InvalidShape(f"{shape!r}: size must be positive")
        return v

    preds: list[list[int]]
    if kind == "chain":
        n = int_arg(0)
        names = _letters(n)
        preds = [[] if i == 0 else [i - 1] for i in range(n)]
    elif kind == "fan_in":
        n = int_arg(0)
        names = [f"p{i}" for i in range(n)] + ["sink"]
        preds = [[] for _ in range(n)] + [list(range(n))]
    elif kind == "fan_out":
        n = int_arg(0)
        names = ["src"] + [f"c{i}" for i in range(n)]
        preds = [[]] + [[0] for _ in range(n)]
    elif kind == "diamond":
        names = ["A", "B", "C", "D"]
        preds = [[], [0], [0], [1, 2]]
    elif kind == "layered" or kind == "bench":
        sparse = kind == "bench"
        if sparse:
            if not args or args[0] not in BENCH_SHAPES:
                raise InvalidShape(f"unknown bench shape {shape!r}; pick from {sorted(BENCH_SHAPES)}")
            widths = list(BENCH_SHAPES[args[0]])
        else:
            try:
                widths = [int(w) for w in ",".join(args).split(",") if w.strip()]
            except ValueError:
                raise InvalidShape(f"{shape!r}: widths must be integers") from None
        if not widths or any(w <= 0 for w in widths):
            raise InvalidShape(f"{shape!r}: empty layer")
        rng = random.Random(seed)
        names, preds, layers = [], [], []
        for li, w in enumerate(widths):
            layer = []
            for j in range(w):
                idx = len(names)
                names.append(f"L{li}_{j}")
                if li == 0:
                    preds.append([])
                elif not sparse:
                    preds.append(list(layers[-1]))
                else:
                    prev = layers[-1]
                    preds.append(sorted(rng.sample(prev, min(2, len(prev)))))
                layer.append(idx)
            if sparse and li > 0:
                # every function of the previous layer keeps at least one consumer
                used = {p for i in layer for p in preds[i]}
                for k, p in enumerate(x for x in layers[-1] if x not in used):
                    tgt = layer[k % len(layer)]
                    preds[tgt] = sorted(set(preds[tgt]) | {p})
            layers.append(layer)
        if sparse:
            if isinstance(output_bytes, int) and output_bytes == 1024:
                output_bytes = (1_000_000, 32_000_000)
            name = name or args[0]
    elif kind == "random":
        n = int_arg(0)
        try:
            prob = float(args[1])
            rseed = int(args[2]) if len(args) > 2 else seed
        except (IndexError, ValueError):
            raise InvalidShape(f"{shape!r}: expected random:N:PROB[:SEED]") from None
        if not 0.0 <= prob <= 1.0:
            raise InvalidShape(f"{shape!r}: edge probability outside [0, 1]")
        rng = random.Random(rseed)
        names = [f"f{i:02d}" for i in range(n)]
        preds = [[j for j in range(i) if rng.random() < prob] for i in range(n)]
        seed = rseed
    else:
        raise InvalidShape(f"unknown shape {shape!r}")

    count = len(names)
    rng = random.Random(seed ^ 0x5EED)
    compute = _per_function(compute_ms, count, "compute_ms", rng)
    sizes = _per_function(output_bytes, count, "output_bytes", rng)
    cold = _per_function(coldstart_ms, count, "coldstart_ms", rng)
    functions = [
        FunctionDef(
            name=names[i],
            inputs=tuple(f"{names[p]}.out" for p in preds[i]),
            outputs=(f"{names[i]}.out",),
            compute_millis=compute[i],
            output_bytes=int(sizes[i]),
            coldstart_millis=cold[i],
        )
        for i in range(count)
    ]
    return WorkflowSpec.build(name or shape.replace(":", "_").replace(",", "-"), functions)
