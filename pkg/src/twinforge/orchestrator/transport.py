"""Two interchangeable channels: in-process queues and a local TCP socket."""
from __future__ import annotations

import logging
import queue
import socket
import time
from typing import Protocol

from twinforge.orchestrator.protocol import (
    HEADER,
    MAX_FRAME,
    PlantUnreachable,
    ProtocolError,
    SequenceGuard,
    TwinMessage,
    decode_body,
    encode_frame,
)

log = logging.getLogger(__name__)


class Channel(Protocol):
    def send_raw(self, msg: TwinMessage) -> None: ...
    def recv_raw(self, timeout: float | None) -> TwinMessage: ...
    def close(self) -> None: ...


class QueueChannel:
    def __init__(self, inbox: queue.Queue, outbox: queue.Queue):
        self._in = inbox
        self._out = outbox

    def send_raw(self, msg: TwinMessage) -> None:
        # round-trip through the wire encoding so both transports see the same data
        self._out.put(encode_frame(msg))

    def recv_raw(self, timeout: float | None) -> TwinMessage:
        try:
            frame = self._in.get(timeout=timeout)
        except queue.Empty as exc:
            raise TimeoutError("no message within timeout") from exc
        return decode_body(frame[HEADER.size :])

    def close(self) -> None:
        pass


def loopback_pair() -> tuple[QueueChannel, QueueChannel]:
    a, b = queue.Queue(), queue.Queue()
    return QueueChannel(a, b), QueueChannel(b, a)


class SocketChannel:
    def __init__(self, sock: socket.socket):
        self.sock = sock

    def send_raw(self, msg: TwinMessage) -> None:
        self.sock.sendall(encode_frame(msg))

    def _read_exact(self, n: int) -> bytes:
        chunks, got = [], 0
        while got < n:
            chunk = self.sock.recv(n - got)
            if not chunk:
                raise ConnectionError("peer closed the connection")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def recv_raw(self, timeout: float | None) -> TwinMessage:
        self.sock.settimeout(timeout)
        try:
            (length,) = HEADER.unpack(self._read_exact(HEADER.size))
            if length > MAX_FRAME:
                raise ProtocolError(f"frame of {length} bytes exceeds limit")
            return decode_body(self._read_exact(length))
        except socket.timeout as exc:
            raise TimeoutError("no message within timeout") from exc

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


def parse_endpoint(endpoint: str) -> tuple[str, int]:
    host, sep, port = endpoint.rpartition(":")
    if not sep or not port.isdigit():
        raise ValueError(f"endpoint must be host:port, got {endpoint!r}")
    return host or "127.0.0.1", int(port)


def listen(endpoint: str) -> socket.socket:
    """Bound, listening socket; raises OSError if the port is taken."""
    host, port = parse_endpoint(endpoint)
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    try:
        srv.bind((host, port))
        srv.listen(1)
    except OSError:
        srv.close()
        raise
    return srv


def accept(server: socket.socket, timeout: float | None = None) -> SocketChannel:
    server.settimeout(timeout)
    conn, _ = server.accept()
    conn.settimeout(None)
    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    return SocketChannel(conn)


def connect(endpoint: str, retries: int = 5, backoff: float = 0.1) -> SocketChannel:
    """Connect with exponential backoff; PlantUnreachable after ``retries`` failures."""
    host, port = parse_endpoint(endpoint)
    delay = backoff
    for attempt in range(retries + 1):
        try:
            sock = socket.create_connection((host, port), timeout=5.0)
            sock.settimeout(None)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            return SocketChannel(sock)
        except OSError as exc:
            if attempt == retries:
                raise PlantUnreachable(f"cannot reach plant at {endpoint}: {exc}") from exc
            log.debug("connect attempt %d failed, retrying in %.2fs", attempt + 1, delay)
            time.sleep(delay)
            delay *= 2
    raise AssertionError("unreachable")


class Link:
    """A channel plus sequence numbering in both directions."""

    def __init__(self, channel: Channel, timeout: float | None = 60.0):
        self.channel = channel
        self.timeout = timeout
        self.guard = SequenceGuard()

    def send(self, kind: str, episode: int | None = None, payload: dict | None = None) -> TwinMessage:
        msg = self.guard.stamp(kind, episode, payload)
        self.channel.send_raw(msg)
        return msg

    def recv(self) -> TwinMessage:
        return self.guard.check(self.channel.recv_raw(self.timeout))

    def close(self) -> None:
        self.channel.close()
