from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

_SEP = "\x1f"


class StoreError(RuntimeError):
    pass


class DuplicateIdError(StoreError):
    """A data id was put twice; stored data is write-once."""


class StoreFull(StoreError):
    pass


class GetTimeout(StoreError):
    """A get waited past its budget: the id was most likely never produced."""


class QueryTimeout(StoreError):
    pass


class ExecutionAborted(StoreError):
    pass


class SourceGone(StoreError):
    pass


class MissingData(StoreError):
    """Central-store read of an absent id; controlflow should make this unreachable."""


@dataclass(frozen=True, order=True)
class DataId:
    execution: str
    key: str

    def wire(self) -> str:
        return f"{self.execution}{_SEP}{self.key}"

    @classmethod
    def from_wire(cls, text: str) -> "DataId":
        execution, key = text.split(_SEP, 1)
        return cls(execution, key)

    def __str__(self) -> str:
        return f"{self.execution}/{self.key}"


@dataclass
class DataMetadata:
    id: DataId
    size_bytes: int
    locations: list[int] = field(default_factory=list)
    access_frequency: dict[int, int] = field(default_factory=dict)

    def copy(self) -> "DataMetadata":
        return DataMetadata(self.id, self.size_bytes, list(self.locations), dict(self.access_frequency))


@dataclass(frozen=True)
class MetaView:
    """Directory reply: a metadata snapshot plus the source chosen for this reader."""

    meta: DataMetadata
    source: int


@dataclass
class LocalStoreEntry:
    id: DataId
    buffer: bytes
    complete: bool = True

    @property
    def size(self) -> int:
        return len(self.buffer)


def digest(buffer: bytes) -> str:
    return hashlib.blake2b(buffer, digest_size=16).hexdigest()
