"""Cluster fabric: message framing, simulated links and a loopback socket relay."""
from .codec import Envelope, FrameDecoder, Kind, decode_chunk, encode_chunk
from .fabric import DEFAULT_CHUNK, MASTER, Fabric, Flow, NodeDown

__all__ = [
    "DEFAULT_CHUNK",
    "MASTER",
    "Envelope",
    "Fabric",
    "Flow",
    "FrameDecoder",
    "Kind",
    "NodeDown",
    "decode_chunk",
    "encode_chunk",
]
