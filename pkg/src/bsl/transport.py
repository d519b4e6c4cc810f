"""Ordered reliable byte transports carrying wire frames.

Both transports move the same serialized frames: the in-process pair is a
blocking queue of frame bytes, the TCP transport a socket. A session driven
over either yields bit-identical results because the protocol is strictly
lockstep.
"""

from __future__ import annotations

import queue
import socket

from .errors import DecodeError, TransportError
from .wire import Message, decode_frame_header, decode_payload, serialize

DEFAULT_TIMEOUT = 60.0


class InProcTransport:
    """One endpoint of an in-process frame queue pair."""

    def __init__(self, inbox: "queue.Queue[bytes | None]", outbox: "queue.Queue[bytes | None]",
                 frame_log: list[bytes], timeout: float) -> None:
        self._inbox = inbox
        self._outbox = outbox
        self._timeout = timeout
        self.frame_log = frame_log  # every frame sent by either end, in order

    def send_bytes(self, frame: bytes) -> None:
        self.frame_log.append(frame)
        self._outbox.put(frame)

    def recv_frame(self) -> tuple[int, bytes]:
        try:
            frame = self._inbox.get(timeout=self._timeout)
        except queue.Empty:
            raise TransportError(f"no frame within {self._timeout}s") from None
        if frame is None:
            raise TransportError("transport closed by peer")
        ftype, length = decode_frame_header(frame)
        payload = frame[9:]
        if len(payload) != length:
            raise DecodeError(f"frame declares {length} payload bytes, got {len(payload)}")
        return ftype, payload

    def close(self) -> None:
        self._outbox.put(None)


def inproc_pair(timeout: float = DEFAULT_TIMEOUT) -> tuple[InProcTransport, InProcTransport]:
    """Return (client_end, server_end) sharing one ordered frame log."""
    a: "queue.Queue[bytes | None]" = queue.Queue()
    b: "queue.Queue[bytes | None]" = queue.Queue()
    log: list[bytes] = []
    return InProcTransport(a, b, log, timeout), InProcTransport(b, a, log, timeout)


class TcpTransport:
    """Frame transport over a connected TCP socket."""

    def __init__(self, sock: socket.socket, timeout: float = DEFAULT_TIMEOUT) -> None:
        sock.settimeout(timeout)
        self._sock = sock

    def _read_exact(self, n: int) -> bytes:
        chunks = []
        got = 0
        while got < n:
            try:
                chunk = self._sock.recv(n - got)
            except socket.timeout:
                raise TransportError(f"socket read timed out needing {n - got} bytes") from None
            if not chunk:
                raise TransportError(f"connection closed with {n - got} bytes outstanding")
            chunks.append(chunk)
            got += len(chunk)
        return b"".join(chunks)

    def send_bytes(self, frame: bytes) -> None:
        try:
            self._sock.sendall(frame)
        except OSError as e:
            raise TransportError(f"send failed: {e}") from None

    def recv_frame(self) -> tuple[int, bytes]:
        header = self._read_exact(9)
        ftype, length = decode_frame_header(header)
        return ftype, self._read_exact(length)

    def close(self) -> None:
        try:
            self._sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass
        self._sock.close()


def tcp_listen(host: str, port: int) -> socket.socket:
    """Bind a listener; port 0 picks an ephemeral port (read it back via getsockname)."""
    srv = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    srv.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    srv.bind((host, port))
    srv.listen(1)
    return srv


def tcp_accept(srv: socket.socket, timeout: float = DEFAULT_TIMEOUT) -> TcpTransport:
    srv.settimeout(timeout)
    try:
        conn, _ = srv.accept()
    except socket.timeout:
        raise TransportError("no client connected before timeout") from None
    return TcpTransport(conn, timeout)


def tcp_connect(host: str, port: int, timeout: float = DEFAULT_TIMEOUT) -> TcpTransport:
    try:
        sock = socket.create_connection((host, port), timeout=timeout)
    except OSError as e:
        raise TransportError(f"connect to {host}:{port} failed: {e}") from None
    return TcpTransport(sock, timeout)


def send_message(transport, msg: Message) -> None:
    transport.send_bytes(serialize(msg))


def recv_message(transport) -> Message:
    ftype, payload = transport.recv_frame()
    return decode_payload(ftype, payload)
