"""Loopback TCP transport for real-time smoke runs.

Each node role gets a listening socket on 127.0.0.1.  Envelopes are framed
with the shared codec, written to the destination's socket, decoded by a
reader thread and handed back to the event loop with ``call_threadsafe``.
"""
from __future__ import annotations

import logging
import socket
import threading
from typing import Callable, Iterable

from .codec import Envelope, FrameDecoder

log = logging.getLogger(__name__)


class SocketHub:
    def __init__(self, nodes: Iterable[int], on_envelope: Callable[[Envelope], None]):
        self.on_envelope = on_envelope
        self._listeners: dict[int, socket.socket] = {}
        self._addresses: dict[int, tuple[str, int]] = {}
        self._conns: dict[tuple[int, int], socket.socket] = {}
        self._send_lock = threading.Lock()
        self._threads: list[threading.Thread] = []
        self._closed = False
        for node in nodes:
            self.add_node(node)

    def add_node(self, node: int) -> None:
        if node in self._listeners:
            return
        srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        srv.bind(("127.0.0.1", 0))
        srv.listen()
        self._listeners[node] = srv
        self._addresses[node] = srv.getsockname()
        self._spawn(self._accept_loop, srv)

    def _spawn(self, target, *args) -> None:
        t = threading.Thread(target=target, args=args, daemon=True)
        t.start()
        self._threads.append(t)

    def _accept_loop(self, srv: socket.socket) -> None:
        while not self._closed:
            try:
                conn, _ = srv.accept()
            except OSError:
                return
            self._spawn(self._read_loop, conn)

    def _read_loop(self, conn: socket.socket) -> None:
        decoder = FrameDecoder()
        with conn:
            while True:
                try:
                    data = conn.recv(1 << 16)
                except OSError:
                    return
                if not data:
                    return
                for env in decoder.feed(data):
                    self.on_envelope(env)

    def send(self, env: Envelope) -> None:
        key = (env.src, env.dst)
        frame = env.encode()
        with self._send_lock:
            conn = self._conns.get(key)
            if conn is None:
                conn = socket.create_connection(self._addresses[env.dst])
                conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                self._conns[key] = conn
            conn.sendall(frame)

    def close(self) -> None:
        self._closed = True
        with self._send_lock:
            for conn in self._conns.values():
                conn.close()
            self._conns.clear()
        for srv in self._listeners.values():
            try:
                srv.shutdown(socket.SHUT_RDWR)
            except OSError:
                pass
            srv.close()


class SocketRelay:
    """Fabric relay that routes control envelopes over a :class:`SocketHub`."""

    def __init__(self, sim, nodes: Iterable[int]):
        self.sim = sim
        self._deliver: Callable[[Envelope], None] | None = None
        self.hub = SocketHub(nodes, self._received)

    def __call__(self, env: Envelope, deliver: Callable[[Envelope], None]) -> None:
        self._deliver = deliver
        self.hub.add_node(env.dst)
        self.sim.hold()
        self.hub.send(env)

    def _received(self, env: Envelope) -> None:
        def run():
            self.sim.release()
            self._deliver(env)

        self.sim.call_threadsafe(run)

    def close(self) -> None:
        self.hub.close()
