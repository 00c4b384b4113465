"""Socket plumbing shared by the services: address parsing, UDP loops, JSON lines."""

from __future__ import annotations

import json
import logging
import socket
import socketserver
import threading

__all__ = ["StartupError", "parse_hostport", "format_hostport", "UdpService",
           "JsonLineServer", "JsonLineClient", "bind_udp"]

log = logging.getLogger(__name__)


class StartupError(RuntimeError):
    pass


def parse_hostport(text: str, default_port: int | None = None) -> tuple[str, int]:
    """Parse ``host:port``, ``[v6]:port`` or a bare host when a default is given."""
    text = text.strip()
    if text.startswith("["):
        host, _, rest = text[1:].partition("]")
        port = rest[1:] if rest.startswith(":") else ""
    elif text.count(":") == 1:
        host, port = text.split(":")
    else:
        host, port = text, ""
    if not port:
        if default_port is None:
            raise ValueError(f"missing port in {text!r}")
        return host, default_port
    return host, int(port)


def format_hostport(addr) -> str:
    host, port = addr[0], addr[1]
    return f"[{host}]:{port}" if ":" in host else f"{host}:{port}"


def _family(host: str) -> int:
    return socket.AF_INET6 if ":" in host else socket.AF_INET


def bind_udp(addr: tuple[str, int], role: str) -> socket.socket:
    sock = socket.socket(_family(addr[0]), socket.SOCK_DGRAM)
    try:
        sock.bind(addr)
    except OSError as exc:
        sock.close()
        raise StartupError(f"{role}: cannot bind UDP {format_hostport(addr)} ({exc.strerror})") from exc
    return sock


class UdpService:
    """A bound UDP socket with a receive thread calling ``handle_datagram``."""

    role = "udp"
    poll_interval = 0.1

    def __init__(self, bind: tuple[str, int]):
        self.sock = bind_udp(bind, self.role)
        self._stop = threading.Event()
        self._thread = None

    @property
    def address(self) -> tuple[str, int]:
        return self.sock.getsockname()[:2]

    def start(self):
        self.sock.settimeout(self.poll_interval)
        self._thread = threading.Thread(target=self._loop, name=self.role, daemon=True)
        self._thread.start()
        return self

    def _loop(self):
        while not self._stop.is_set():
            try:
                data, peer = self.sock.recvfrom(65535)
            except socket.timeout:
                self.tick()
                continue
            except OSError:
                if self._stop.is_set():
                    break
                raise
            try:
                self.handle_datagram(data, peer[:2])
            except Exception:
                log.exception("%s: error handling datagram from %s", self.role, peer)
            self.tick()

    def handle_datagram(self, data: bytes, peer: tuple[str, int]):
        raise NotImplementedError

    def tick(self):
        pass

    def sendto(self, data: bytes, peer):
        try:
            self.sock.sendto(data, peer)
        except OSError as exc:
            log.warning("%s: send to %s failed: %s", self.role, peer, exc)

    def stop(self):
        self._stop.set()
        if self._thread is not None:
            self._thread.join(timeout=2)
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.stop()


class _ThreadingServer(socketserver.ThreadingMixIn, socketserver.TCPServer):
    daemon_threads = True
    allow_reuse_address = True
    request_queue_size = 128  # bursts of concurrent container starts


class _V6ThreadingServer(_ThreadingServer):
    address_family = socket.AF_INET6


class JsonLineServer:
    """TCP server speaking one JSON object per line.

    ``handler(request, conn)`` returns the reply object, or ``None`` for no
    reply. ``conn`` lets a handler take over the connection (endpoint attach).
    """

    role = "tcp"

    def __init__(self, bind: tuple[str, int], handler, role: str | None = None):
        outer = self
        if role is not None:
            self.role = role

        class Handler(socketserver.StreamRequestHandler):
            def handle(self):
                conn = _Conn(self.rfile, self.wfile, self.request)
                outer._conns.add(conn)
                try:
                    for line in self.rfile:
                        if not line.strip():
                            continue
                        try:
                            request = json.loads(line)
                            if not isinstance(request, dict):
                                raise ValueError("request must be an object")
                            reply = handler(request, conn)
                        except Exception as exc:  # reported to the client, not fatal
                            reply = {"ok": False, "error": str(exc)}
                        if reply is _DETACHED:
                            conn.held.wait()
                            return
                        if reply is not None:
                            conn.send(reply)
                except (OSError, ValueError):
                    pass
                finally:
                    outer._conns.discard(conn)
                    conn.closed()

        cls = _V6ThreadingServer if ":" in bind[0] else _ThreadingServer
        self._conns = set()
        try:
            self.server = cls(bind, Handler)
        except OSError as exc:
            raise StartupError(
                f"{self.role}: cannot bind TCP {format_hostport(bind)} ({exc.strerror})") from exc
        self._thread = None

    @property
    def address(self) -> tuple[str, int]:
        return self.server.server_address[:2]

    def start(self):
        self._thread = threading.Thread(target=self.server.serve_forever,
                                        kwargs={"poll_interval": 0.1},
                                        name=self.role, daemon=True)
        self._thread.start()
        return self

    def stop(self):
        if self._thread is not None:
            # shutdown() waits for serve_forever, so only call it once started
            self.server.shutdown()
        self.server.server_close()
        for conn in list(self._conns):
            conn.close()
        if self._thread is not None:
            self._thread.join(timeout=2)


_DETACHED = object()


class _Conn:
    """Server side of one JSON-lines connection."""

    DETACH = _DETACHED

    def __init__(self, rfile, wfile, sock):
        self.rfile, self.wfile, self.sock = rfile, wfile, sock
        self.lock = threading.Lock()
        self.held = threading.Event()
        self.on_close = []

    def send(self, obj):
        data = (json.dumps(obj) + "\n").encode()
        with self.lock:
            self.wfile.write(data)
            self.wfile.flush()

    def request(self, obj, timeout: float = 5.0):
        """Send ``obj`` and read one reply line (used on held connections)."""
        with self.lock:
            self.sock.settimeout(timeout)
            self.wfile.write((json.dumps(obj) + "\n").encode())
            self.wfile.flush()
            line = self.rfile.readline()
        if not line:
            raise ConnectionError("endpoint went away")
        return json.loads(line)

    def close(self):
        self.held.set()
        try:
            self.sock.shutdown(socket.SHUT_RDWR)
        except OSError:
            pass

    def closed(self):
        self.held.set()
        for cb in self.on_close:
            cb()


class JsonLineClient:
    """Blocking request/response client for a JSON-lines service."""

    def __init__(self, addr: tuple[str, int], timeout: float = 30.0):
        self.addr = addr
        try:
            self.sock = socket.create_connection(addr, timeout=timeout)
        except OSError as exc:
            raise ConnectionError(f"cannot connect to {format_hostport(addr)}: {exc}") from exc
        self.rfile = self.sock.makefile("rb")
        self.lock = threading.Lock()

    def call(self, **request) -> dict:
        with self.lock:
            self.sock.sendall((json.dumps(request) + "\n").encode())
            line = self.rfile.readline()
        if not line:
            raise ConnectionError(f"{format_hostport(self.addr)} closed the connection")
        return json.loads(line)

    def close(self):
        try:
            self.rfile.close()
            self.sock.close()
        except OSError:
            pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
