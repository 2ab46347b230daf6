"""Distributed immutable key-value store with a metadata directory."""
from .directory import Directory, DirectoryService, Waiter
from .store import DStore, LocalStore, StoreAgent
from .types import (
    DataId,
    DataMetadata,
    DuplicateIdError,
    ExecutionAborted,
    GetTimeout,
    LocalStoreEntry,
    MetaView,
    MissingData,
    QueryTimeout,
    SourceGone,
    StoreError,
    StoreFull,
    digest,
)

__all__ = [
    "DStore", "DataId", "DataMetadata", "Directory", "DirectoryService", "DuplicateIdError",
    "ExecutionAborted", "GetTimeout", "LocalStore", "LocalStoreEntry", "MetaView", "MissingData",
    "QueryTimeout", "SourceGone", "StoreAgent", "StoreError", "StoreFull", "Waiter", "digest",
]
