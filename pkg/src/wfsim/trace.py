"""Timestamped event log shared by all engine components."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any, Iterable, Iterator


@dataclass(frozen=True)
class TraceEvent:
    t: int  # nanoseconds
    node: int | None
    event: str
    execution: str | None = None
    function: str | None = None
    detail: dict = field(default_factory=dict, compare=False, hash=False)

    def to_record(self) -> dict:
        return {
            "t": self.t,
            "node": self.node,
            "event": self.event,
            "execution": self.execution,
            "function": self.function,
            "detail": self.detail,
        }


class ExecutionTrace:
    """Append-only event list with a few query helpers."""

    def __init__(self, events: Iterable[TraceEvent] = ()):
        self.events: list[TraceEvent] = list(events)
        self.enabled = True

    def record(
        self,
        t: int,
        node: int | None,
        event: str,
        execution: str | None = None,
        function: str | None = None,
        **detail: Any,
    ) -> None:
        if self.enabled:
            self.events.append(TraceEvent(t, node, event, execution, function, detail))

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[TraceEvent]:
        return iter(self.events)

    def select(
        self,
        event: str | Iterable[str] | None = None,
        execution: str | None = None,
        function: str | None = None,
        node: int | None = None,
        **detail: Any,
    ) -> list[TraceEvent]:
        """Events matching every given filter; extra keywords match ``detail`` fields."""
        kinds = {event} if isinstance(event, str) else set(event) if event else None
        return [
            e
            for e in self.events
            if (kinds is None or e.event in kinds)
            and (execution is None or e.execution == execution)
            and (function is None or e.function == function)
            and (node is None or e.node == node)
            and all(e.detail.get(k) == v for k, v in detail.items())
        ]

    def first(self, event: str, **kw) -> TraceEvent | None:
        found = self.select(event, **kw)
        return found[0] if found else None

    def time_of(self, event: str, **kw) -> int | None:
        e = self.first(event, **kw)
        return None if e is None else e.t

    def for_execution(self, execution: str) -> "ExecutionTrace":
        return ExecutionTrace(e for e in self.events if e.execution == execution)

    def to_ndjson(self) -> str:
        return "".join(
            json.dumps(e.to_record(), sort_keys=False, separators=(",", ":")) + "\n"
            for e in self.events
        )

    @classmethod
    def from_ndjson(cls, text: str) -> "ExecutionTrace":
        events = []
        for line in text.splitlines():
            if line.strip():
                r = json.loads(line)
                events.append(
                    TraceEvent(r["t"], r["node"], r["event"], r["execution"], r["function"], r["detail"])
                )
        return cls(events)
