"""Length-prefixed binary framing shared by the simulated and socket transports.

Frame layout (network byte order)::

    u32 frame_len | i32 src | i32 dst | u16 kind_len | u16 exec_len | kind | execution | payload

Control payloads are compact JSON objects; ``DataChunk`` payloads use
:func:`encode_chunk`.
"""
from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from typing import Any

_HEAD = struct.Struct("!iiHH")
_LEN = struct.Struct("!I")
_CHUNK = struct.Struct("!HQ?")


class Kind:
    INVOKE = "InvokeFunction"
    COMPLETED = "FunctionCompleted"
    REGISTER_PLAN = "RegisterPlan"
    PUT_LOCAL = "PutLocal"
    REGISTER_META = "RegisterMeta"
    QUERY_META = "QueryMeta"
    META_REPLY = "MetaReply"
    META_PENDING = "MetaPending"
    META_ABORT = "MetaAbort"
    FETCH = "FetchData"
    FETCH_FAILED = "FetchFailed"
    CHUNK = "DataChunk"
    CENTRAL_PUT = "CentralPut"
    CENTRAL_PUT_ACK = "CentralPutAck"
    CENTRAL_GET = "CentralGet"

    DATA = frozenset({CHUNK})


@dataclass(frozen=True)
class Envelope:
    src: int
    dst: int
    kind: str
    execution: str
    payload: bytes = b""

    @classmethod
    def control(cls, src: int, dst: int, kind: str, execution: str | None, /, **fields: Any) -> "Envelope":
        body = json.dumps(fields, separators=(",", ":"), sort_keys=True).encode()
        return cls(src, dst, kind, execution or "", body)

    def fields(self) -> dict:
        return json.loads(self.payload) if self.payload else {}

    def encode(self) -> bytes:
        kind = self.kind.encode()
        execution = self.execution.encode()
        body = _HEAD.pack(self.src, self.dst, len(kind), len(execution)) + kind + execution + self.payload
        return _LEN.pack(len(body)) + body

    @classmethod
    def decode(cls, frame: bytes | memoryview) -> "Envelope":
        """Decode one frame *without* its length prefix."""
        frame = bytes(frame)
        src, dst, klen, elen = _HEAD.unpack_from(frame, 0)
        pos = _HEAD.size
        kind = frame[pos:pos + klen].decode()
        pos += klen
        execution = frame[pos:pos + elen].decode()
        pos += elen
        return cls(src, dst, kind, execution, frame[pos:])


class FrameDecoder:
    """Incremental decoder for a byte stream of frames."""

    def __init__(self):
        self._buf = bytearray()

    def feed(self, data: bytes) -> list[Envelope]:
        self._buf += data
        out = []
        while len(self._buf) >= _LEN.size:
            (n,) = _LEN.unpack_from(self._buf, 0)
            if len(self._buf) < _LEN.size + n:
                break
            out.append(Envelope.decode(memoryview(self._buf)[_LEN.size:_LEN.size + n]))
            del self._buf[:_LEN.size + n]
        return out


def encode_chunk(data_id: str, offset: int, data: bytes | memoryview, last: bool) -> bytes:
    key = data_id.encode()
    return _CHUNK.pack(len(key), offset, last) + key + bytes(data)


def decode_chunk(payload: bytes) -> tuple[str, int, bytes, bool]:
    klen, offset, last = _CHUNK.unpack_from(payload, 0)
    pos = _CHUNK.size
    data_id = payload[pos:pos + klen].decode()
    return data_id, offset, payload[pos + klen:], last


def chunk_data_len(payload: bytes) -> int:
    klen = _CHUNK.unpack_from(payload, 0)[0]
    return len(payload) - _CHUNK.size - klen
