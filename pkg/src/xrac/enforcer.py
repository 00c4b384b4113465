"""Whitelist enforcement point and application-message relay.

Traffic between two endpoints is forwarded only if an unordered whitelist
pair covers both addresses. Static pairs come from configuration; dynamic
pairs are granted per authenticator session and reference counted, so a pair
held by two sessions survives until both revoke it.
"""

from __future__ import annotations

import ipaddress
import json
import logging
import threading
from dataclasses import dataclass
from typing import Callable, Iterable

from xrac.net import JsonLineClient, JsonLineServer, _Conn
from xrac.radius import Peer, format_peer, parse_peer

__all__ = ["WhitelistPair", "Whitelist", "Relay", "FetchResult", "EnforcerService",
           "EnforcerControlClient", "EnforcerDataClient", "EndpointHandle", "web_page"]

log = logging.getLogger("xrac.enforcer")


@dataclass(frozen=True)
class WhitelistPair:
    a: Peer
    b: Peer
    origin: str = "static"  # "static" or the granting session id

    def __post_init__(self):
        a, b = parse_peer(self.a), parse_peer(self.b)
        # canonical order makes {a,b} == {b,a}
        if (b.network_address, b.prefixlen) < (a.network_address, a.prefixlen):
            a, b = b, a
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)

    @property
    def key(self) -> tuple[Peer, Peer]:
        return self.a, self.b

    def matches(self, src: ipaddress.IPv6Address, dst: ipaddress.IPv6Address) -> bool:
        return (src in self.a and dst in self.b) or (src in self.b and dst in self.a)

    def to_json(self) -> list[str]:
        return [format_peer(self.a), format_peer(self.b)]


class Whitelist:
    """Pair whitelist with static entries and per-session dynamic grants."""

    def __init__(self, static_pairs: Iterable = ()):
        self._lock = threading.RLock()
        self._static = tuple(p if isinstance(p, WhitelistPair) else WhitelistPair(*p)
                             for p in static_pairs)
        self._holders: dict[tuple[Peer, Peer], set[str]] = {}
        self.mutations = 0

    def forward_decision(self, src, dst) -> bool:
        src, dst = ipaddress.IPv6Address(src), ipaddress.IPv6Address(dst)
        with self._lock:
            if any(p.matches(src, dst) for p in self._static):
                return True
            return any((src in a and dst in b) or (src in b and dst in a)
                       for a, b in self._holders)

    def authorize_pair(self, rac, peers: Iterable, session: str):
        rac_net = parse_peer(ipaddress.IPv6Address(rac))
        peers = [parse_peer(p) for p in peers]
        keys = [WhitelistPair(rac_net, p).key for p in peers]
        with self._lock:
            for key in keys:
                holders = self._holders.setdefault(key, set())
                if session not in holders:
                    holders.add(session)
                    self.mutations += 1
        if keys:
            log.info("grant session=%s rac=%s peers=%s", session, rac,
                     ",".join(map(format_peer, peers)))

    def revoke_session(self, session: str) -> int:
        removed = 0
        with self._lock:
            for key in list(self._holders):
                holders = self._holders[key]
                if session in holders:
                    holders.discard(session)
                    removed += 1
                    self.mutations += 1
                    if not holders:
                        del self._holders[key]
        if removed:
            log.info("revoke session=%s entries=%d", session, removed)
        return removed

    # narrow interface used by the authenticator
    def grant(self, session: str, rac, peers: Iterable):
        self.authorize_pair(rac, peers, session)

    def revoke(self, session: str):
        self.revoke_session(session)

    def pairs(self) -> list[WhitelistPair]:
        with self._lock:
            dynamic = [WhitelistPair(a, b, origin=s)
                       for (a, b), holders in self._holders.items() for s in sorted(holders)]
        return list(self._static) + dynamic

    def dynamic_pairs(self) -> set[tuple[str, str]]:
        with self._lock:
            return {(format_peer(a), format_peer(b)) for a, b in self._holders}

    def dump(self) -> dict:
        with self._lock:
            return {
                "static": [p.to_json() for p in self._static],
                "dynamic": [{"pair": [format_peer(a), format_peer(b)], "sessions": sorted(h)}
                            for (a, b), h in sorted(self._holders.items(), key=lambda kv: str(kv[0]))],
                "mutations": self.mutations,
            }


def web_page(content: str) -> Callable[[str, str], str]:
    """Handler for a stub web server returning one HTML page."""
    def handle(src: str, request: str) -> str:
        if not request.startswith("GET "):
            return "HTTP/1.0 400 Bad Request\r\n\r\n"
        return ("HTTP/1.0 200 OK\r\nContent-Type: text/html\r\n\r\n"
                f"<html><body><p>{content}</p></body></html>\n")
    return handle


@dataclass(frozen=True)
class FetchResult:
    status: str  # "ok", "blocked" or "unreachable"
    response: str | None = None

    @property
    def allowed(self) -> bool:
        return self.status == "ok"

    def to_json(self) -> dict:
        return {"status": self.status, "resp": self.response}


class _RemoteEndpoint:
    def __init__(self, conn: _Conn):
        self.conn = conn

    def __call__(self, src: str, request: str) -> str:
        reply = self.conn.request({"op": "deliver", "src": src, "req": request})
        return reply["resp"]


class Relay:
    """Endpoint registry plus whitelist-checked request delivery."""

    def __init__(self, whitelist: Whitelist):
        self.whitelist = whitelist
        self._endpoints: dict[ipaddress.IPv6Address, Callable[[str, str], str]] = {}
        self._lock = threading.Lock()

    def attach(self, addr, handler: Callable[[str, str], str]):
        addr = ipaddress.IPv6Address(addr)
        with self._lock:
            if addr in self._endpoints:
                raise ValueError(f"address {addr} already attached")
            self._endpoints[addr] = handler

    def detach(self, addr, handler=None):
        """Remove the endpoint at ``addr`` (only if it is ``handler``, when given)."""
        addr = ipaddress.IPv6Address(addr)
        with self._lock:
            current = self._endpoints.get(addr)
            if current is not None and (handler is None or current is handler):
                return self._endpoints.pop(addr)
        return None

    def attached(self) -> list[str]:
        with self._lock:
            return sorted(a.compressed for a in self._endpoints)

    def relay_fetch(self, src, dst, request: str) -> FetchResult:
        src, dst = ipaddress.IPv6Address(src), ipaddress.IPv6Address(dst)
        if not (self.whitelist.forward_decision(src, dst)
                and self.whitelist.forward_decision(dst, src)):
            return FetchResult("blocked")
        with self._lock:
            handler = self._endpoints.get(dst)
            src_known = src in self._endpoints
        if handler is None or not src_known:
            return FetchResult("unreachable")
        try:
            response = handler(src.compressed, request)
        except Exception as exc:
            log.warning("delivery %s -> %s failed: %s", src, dst, exc)
            self.detach(dst, handler)
            return FetchResult("unreachable")
        # the reply travels dst -> src; re-check in case a revoke raced the request
        if not self.whitelist.forward_decision(dst, src):
            return FetchResult("blocked")
        return FetchResult("ok", response)


class EnforcerService:
    """Control socket for the authenticator, data socket for endpoints."""

    def __init__(self, data_bind, control_bind, static_pairs: Iterable = ()):
        self.whitelist = Whitelist(static_pairs)
        self.relay = Relay(self.whitelist)
        self.control = JsonLineServer(control_bind, self._control, role="enforcer-control")
        try:
            self.data = JsonLineServer(data_bind, self._data, role="enforcer-data")
        except Exception:
            self.control.stop()
            raise

    @property
    def control_address(self):
        return self.control.address

    @property
    def data_address(self):
        return self.data.address

    def start(self):
        self.control.start()
        self.data.start()
        return self

    def stop(self):
        self.data.stop()
        self.control.stop()

    def _control(self, req: dict, conn):
        op = req.get("op")
        if op == "grant":
            self.whitelist.authorize_pair(req["rac"], [parse_peer(p) for p in req["peers"]],
                                          str(req["session"]))
            return {"ok": True}
        if op == "revoke":
            return {"ok": True, "removed": self.whitelist.revoke_session(str(req["session"]))}
        if op == "dump":
            return {"ok": True, **self.whitelist.dump(), "attached": self.relay.attached()}
        raise ValueError(f"unknown control op {op!r}")

    def _data(self, req: dict, conn: _Conn):
        op = req.get("op")
        if op == "fetch":
            return {"ok": True, **self.relay.relay_fetch(req["src"], req["dst"], req["req"]).to_json()}
        if op == "attach":
            endpoint = _RemoteEndpoint(conn)
            self.relay.attach(req["addr"], endpoint)
            conn.on_close.append(lambda: self.relay.detach(req["addr"], endpoint))
            conn.send({"ok": True})
            return conn.DETACH
        if op == "detach":
            endpoint = self.relay.detach(req["addr"])
            if isinstance(endpoint, _RemoteEndpoint):
                endpoint.conn.close()
            return {"ok": True, "detached": endpoint is not None}
        raise ValueError(f"unknown data op {op!r}")


class EnforcerControlClient:
    """What the authenticator talks to; same ``grant``/``revoke`` surface as Whitelist."""

    def __init__(self, addr):
        self.addr = tuple(addr)
        self._client = None
        self._lock = threading.Lock()

    def _call(self, **req) -> dict:
        with self._lock:
            if self._client is None:
                self._client = JsonLineClient(self.addr, timeout=5)
            try:
                reply = self._client.call(**req)
            except (OSError, ConnectionError, ValueError):
                self._client.close()
                self._client = None
                raise
        if not reply.get("ok"):
            raise RuntimeError(reply.get("error", "enforcer error"))
        return reply

    def grant(self, session: str, rac, peers: Iterable):
        self._call(op="grant", session=session, rac=str(rac),
                   peers=[format_peer(parse_peer(p)) for p in peers])

    def revoke(self, session: str):
        self._call(op="revoke", session=session)

    def dump(self) -> dict:
        return self._call(op="dump")

    def close(self):
        with self._lock:
            if self._client is not None:
                self._client.close()
                self._client = None


class EndpointHandle:
    """An attached endpoint: serves relay deliveries on its own connection."""

    def __init__(self, data_addr, addr, handler: Callable[[str, str], str]):
        self.data_addr = tuple(data_addr)
        self.addr = ipaddress.IPv6Address(addr)
        self.handler = handler
        self._client = JsonLineClient(self.data_addr, timeout=None)
        reply = self._client.call(op="attach", addr=self.addr.compressed)
        if not reply.get("ok"):
            self._client.close()
            raise RuntimeError(reply.get("error", "attach failed"))
        self._thread = threading.Thread(target=self._serve, daemon=True,
                                        name=f"endpoint-{self.addr}")
        self._thread.start()

    def _serve(self):
        rfile, sock = self._client.rfile, self._client.sock
        try:
            for line in rfile:
                req = json.loads(line)
                try:
                    reply = {"ok": True, "resp": self.handler(req.get("src"), req.get("req", ""))}
                except Exception as exc:
                    reply = {"ok": False, "error": str(exc), "resp": None}
                sock.sendall((json.dumps(reply) + "\n").encode())
        except (OSError, ValueError):
            pass

    def close(self):
        try:
            with JsonLineClient(self.data_addr, timeout=5) as c:
                c.call(op="detach", addr=self.addr.compressed)
        except (OSError, ConnectionError):
            pass
        self._client.close()
        self._thread.join(timeout=2)


class EnforcerDataClient:
    def __init__(self, addr):
        self.addr = tuple(addr)

    def fetch(self, src, dst, request: str = "GET /index.html") -> FetchResult:
        with JsonLineClient(self.addr, timeout=10) as c:
            reply = c.call(op="fetch", src=str(src), dst=str(dst), req=request)
        if not reply.get("ok"):
            raise RuntimeError(reply.get("error", "fetch failed"))
        return FetchResult(reply["status"], reply.get("resp"))

    def attach(self, addr, handler) -> EndpointHandle:
        return EndpointHandle(self.addr, addr, handler)
