"""Request/response over persistent TCP connections.

One connection is kept per (caller, target) pair and re-opened lazily after
any failure. Each connection carries one outstanding request at a time;
responses are matched to requests by ``msgId`` and anything else on the
stream is discarded.
"""

from __future__ import annotations

import itertools
import logging
import socket
import socketserver
import threading
import time
import uuid
from concurrent.futures import ThreadPoolExecutor, as_completed
from typing import Callable, Iterator, Optional

from raftws.wire import DecodeError, Message, decode, encode

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT_MS = 1000
MAX_FRAME = 64 * 1024 * 1024


class TransportError(Exception):
    def __init__(self, target: str, detail: str = "") -> None:
        super().__init__(f"{target}: {detail}" if detail else target)
        self.target = target


class CallTimeout(TransportError):
    pass


class ConnectionFailed(TransportError):
    pass


class BadFrame(TransportError):
    pass


def parse_address(address: str) -> tuple[str, int]:
    host, _, port = address.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"not a host:port address: {address!r}")
    return host, int(port)


class _LineSocket:
    """A socket plus a receive buffer that yields whole frames under a deadline."""

    def __init__(self, sock: socket.socket) -> None:
        self.sock = sock
        self.buf = bytearray()

    def read_frame(self, deadline: Optional[float]) -> bytes:
        while True:
            nl = self.buf.find(b"\n")
            if nl >= 0:
                frame = bytes(self.buf[:nl + 1])
                del self.buf[:nl + 1]
                return frame
            if len(self.buf) > MAX_FRAME:
                raise DecodeError("frame too large")
            if deadline is not None:
                remaining = deadline - time.monotonic()
                if remaining <= 0:
                    raise socket.timeout("deadline")
                self.sock.settimeout(remaining)
            else:
                self.sock.settimeout(None)
            chunk = self.sock.recv(65536)
            if not chunk:
                raise ConnectionResetError("peer closed connection")
            self.buf += chunk

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


class Connection:
    def __init__(self, target: str) -> None:
        self.target = target
        self.lock = threading.Lock()
        self._ls: Optional[_LineSocket] = None

    def _open(self, deadline: float) -> _LineSocket:
        if self._ls is None:
            host, port = parse_address(self.target)
            timeout = max(deadline - time.monotonic(), 0.001)
            try:
                sock = socket.create_connection((host, port), timeout=timeout)
            except socket.timeout:
                raise CallTimeout(self.target, "connect timed out") from None
            except OSError as exc:
                raise ConnectionFailed(self.target, str(exc)) from None
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            self._ls = _LineSocket(sock)
        return self._ls

    def drop(self) -> None:
        if self._ls is not None:
            self._ls.close()
            self._ls = None

    def request(self, msg: Message, timeout_ms: float) -> Message:
        deadline = time.monotonic() + timeout_ms / 1000.0
        frame = encode(msg)
        with self.lock:
            ls = self._open(deadline)
            try:
                ls.sock.settimeout(max(deadline - time.monotonic(), 0.001))
                ls.sock.sendall(frame)
                while True:
                    resp = decode(ls.read_frame(deadline))
                    if resp.msg_id == msg.msg_id:
                        return resp
                    log.debug("discarding uncorrelated frame %s from %s", resp.msg_id, self.target)
            except socket.timeout:
                self.drop()
                raise CallTimeout(self.target, f"no response within {timeout_ms:.0f} ms") from None
            except DecodeError as exc:
                self.drop()
                raise BadFrame(self.target, str(exc)) from None
            except OSError as exc:
                self.drop()
                raise ConnectionFailed(self.target, str(exc)) from None


class Transport:
    """Client side of the wire protocol for one caller identity."""

    def __init__(self, sender: str, default_timeout_ms: float = DEFAULT_TIMEOUT_MS) -> None:
        self.sender = sender
        self.default_timeout_ms = default_timeout_ms
        self._conns: dict[str, Connection] = {}
        self._lock = threading.Lock()
        self._ids = itertools.count()
        self._prefix = uuid.uuid4().hex[:8]

    def _conn(self, target: str) -> Connection:
        with self._lock:
            conn = self._conns.get(target)
            if conn is None:
                conn = self._conns[target] = Connection(target)
            return conn

    def new_message(self, body) -> Message:
        return Message(body=body, msg_id=f"{self._prefix}-{next(self._ids)}", sender=self.sender)

    def call(self, target: str, body, timeout_ms: Optional[float] = None) -> Message:
        """Send ``body`` to ``target`` and wait for the matching response.

        Raises :class:`CallTimeout`, :class:`ConnectionFailed` or
        :class:`BadFrame`.
        """
        timeout = self.default_timeout_ms if timeout_ms is None else timeout_ms
        return self._conn(target).request(self.new_message(body), timeout)

    def broadcast_parallel(self, targets, body, timeout_ms: Optional[float] = None
                           ) -> Iterator[tuple[str, object]]:
        """Call every target concurrently; yield ``(target, response | error)`` as each finishes."""
        targets = list(targets)
        if not targets:
            raise ValueError("no targets")
        return self._fan_out(targets, body, timeout_ms)

    def _fan_out(self, targets, body, timeout_ms):
        pool = ThreadPoolExecutor(max_workers=len(targets))
        try:
            futures = {pool.submit(self.call, t, body, timeout_ms): t for t in targets}
            for fut in as_completed(futures):
                try:
                    yield futures[fut], fut.result()
                except TransportError as exc:
                    yield futures[fut], exc
        finally:
            pool.shutdown(wait=False)

    def close(self) -> None:
        with self._lock:
            for conn in self._conns.values():
                conn.drop()
            self._conns.clear()


# ----------------------------------------------------------------------- server


Handler = Callable[[Message], object]


class _ThreadingServer(socketserver.ThreadingTCPServer):
    daemon_threads = True
    allow_reuse_address = True
    # the default backlog of 5 drops SYNs when a batch of clients connects at once,
    # and the kernel's 1 s retransmit then looks like a request timeout
    request_queue_size = 128


class RpcServer:
    """Serve the wire protocol; ``handler(msg)`` returns the response body.

    A handler returning ``None`` sends nothing back. Each connection gets
    its own thread, so a slow handler only blocks its own caller.
    """

    def __init__(self, handler: Handler, host: str = "127.0.0.1", port: int = 0,
                 identity: Optional[str] = None) -> None:
        outer = self
        self.handler = handler
        self._clients: set[socket.socket] = set()
        self._clients_lock = threading.Lock()

        class _Conn(socketserver.BaseRequestHandler):
            def handle(self) -> None:
                outer._serve(self.request)

        self._server = _ThreadingServer((host, port), _Conn)
        h, p = self._server.server_address[:2]
        self.address = f"{h}:{p}"
        self.identity = identity or self.address
        self._thread: Optional[threading.Thread] = None

    def _serve(self, sock: socket.socket) -> None:
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        with self._clients_lock:
            self._clients.add(sock)
        ls = _LineSocket(sock)
        try:
            while True:
                try:
                    msg = decode(ls.read_frame(None))
                except DecodeError as exc:
                    log.warning("closing connection after bad frame: %s", exc)
                    return
                body = self.handler(msg)
                if body is None:
                    continue
                resp = Message(body=body, msg_id=msg.msg_id, sender=self.identity)
                sock.sendall(encode(resp))
        except OSError:
            pass
        finally:
            with self._clients_lock:
                self._clients.discard(sock)
            ls.close()

    def start(self) -> "RpcServer":
        self._thread = threading.Thread(target=self._server.serve_forever,
                                        name=f"rpc-{self.address}", daemon=True)
        self._thread.start()
        return self

    def stop(self) -> None:
        if self._thread is not None:
            self._server.shutdown()
            self._thread = None
        self._server.server_close()
        with self._clients_lock:
            for s in list(self._clients):
                try:
                    s.shutdown(socket.SHUT_RDWR)
                except OSError:
                    pass
                s.close()
            self._clients.clear()
