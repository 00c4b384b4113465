"""Container authenticator: EAPoUDP toward supplicants, RADIUS toward the AS.

EAP is relayed pass-through in both directions: the bytes received from one
side are the bytes sent to the other. On Access-Accept the CAZD is pushed to
the enforcer and to the supplicant; enforcer state only ever changes on a
valid Accept, on Logoff, or when a Start replaces an authorized session.
A Logoff is answered with an EAP Failure once the grants are revoked.
"""

from __future__ import annotations

import enum
import itertools
import logging
import random
import secrets
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

from xrac.eap import (
    EapCode, EapoUdpFrame, EapPacket, EapType, FrameType, MalformedFrame, MalformedPacket,
    decode_eap, decode_eapoudp, encode_eap, encode_eapoudp,
)
from xrac.net import UdpService, bind_udp
from xrac.radius import (
    CAZD_VENDOR_ID, MESSAGE_AUTHENTICATOR, NAS_IDENTIFIER, STATE, VENDOR_SPECIFIC, CazdError,
    RadiusAttribute, RadiusCode, RadiusError, RadiusPacket, decode_radius, eap_attributes,
    encode_radius, parse_cazd,
)

__all__ = ["Authenticator", "CaService", "CaSession", "CaState", "ToPeer", "ToServer"]

log = logging.getLogger("xrac.ca")

RETRANSMIT_INTERVAL = 2.0
RETRANSMIT_BUDGET = 3
FAILED_SESSION_TTL = 60.0


class CaState(enum.Enum):
    IDLE = "Idle"
    RELAYING = "Relaying"
    AUTHORIZED = "Authorized"
    FAILED = "Failed"


@dataclass(frozen=True)
class ToPeer:
    peer: tuple
    data: bytes


@dataclass(frozen=True)
class ToServer:
    data: bytes


@dataclass
class _Pending:
    radius_id: int
    authenticator: bytes
    wire: bytes
    attempts: int = 1


@dataclass
class CaSession:
    peer: tuple
    session_id: str
    state: CaState = CaState.IDLE
    last_radius_id: int | None = None
    radius_state_token: bytes | None = None
    retransmit_budget: int = RETRANSMIT_BUDGET
    timer_deadline: float | None = None
    request_id: int = 0              # EAP id of the last request sent to the peer
    answered_id: int | None = None   # EAP id of the last response relayed to the AS
    last_out: list[bytes] = field(default_factory=list)
    pending: _Pending | None = None
    granted: bool = False
    ended_at: float | None = None

    @property
    def terminal(self) -> bool:
        return self.state in (CaState.AUTHORIZED, CaState.FAILED)


def _frame(packet: EapPacket | bytes) -> bytes:
    return encode_eapoudp(EapoUdpFrame.wrap(packet))


def _cazd_attributes(attrs) -> list[RadiusAttribute]:
    return [a for a in attrs if a.attr_type == VENDOR_SPECIFIC and len(a.value) >= 4
            and struct.unpack_from("!I", a.value)[0] == CAZD_VENDOR_ID]


class Authenticator:
    """Session table and relay logic; returns the datagrams to send."""

    def __init__(self, secret: bytes, enforcer, *, nas_identifier: str = "xrac-ca",
                 retransmit_interval: float = RETRANSMIT_INTERVAL,
                 retransmit_budget: int = RETRANSMIT_BUDGET,
                 clock=time.monotonic, rng: random.Random | None = None):
        self.secret = secret
        self.enforcer = enforcer
        self.nas_identifier = nas_identifier.encode()
        self.retransmit_interval = retransmit_interval
        self.retransmit_budget = retransmit_budget
        self.clock = clock
        self.rng = rng or random.SystemRandom()
        self.sessions: dict[tuple, CaSession] = {}
        self._pending: dict[int, CaSession] = {}
        self._next_radius_id = self.rng.randrange(256)
        self._serial = itertools.count(1)
        self._lock = threading.RLock()
        self.counters = {"ignored_frames": 0, "malformed_frames": 0,
                         "dropped_responses": 0, "retransmits": 0}

    # -- helpers -------------------------------------------------------------

    def _event(self, s: CaSession, event: str, **extra):
        detail = "".join(f" {k}={v}" for k, v in extra.items())
        log.info("session=%s event=%s state=%s%s", s.session_id, event, s.state.value, detail)

    def _to_peer(self, s: CaSession, *frames: bytes) -> list[ToPeer]:
        s.last_out = list(frames)
        return [ToPeer(s.peer, f) for f in frames]

    def _fail(self, s: CaSession, eap_failure: bytes | None, reason: str, now: float):
        s.state = CaState.FAILED
        s.ended_at = now
        self._drop_pending(s)
        self._event(s, "failed", reason=reason)
        if eap_failure is None:
            eap_failure = encode_eap(EapPacket.failure(s.request_id))
        return self._to_peer(s, _frame(eap_failure))

    def _drop_pending(self, s: CaSession):
        if s.pending is not None:
            self._pending.pop(s.pending.radius_id, None)
            s.pending = None
            s.timer_deadline = None

    def _teardown(self, s: CaSession):
        self._drop_pending(s)
        if s.granted:
            try:
                self.enforcer.revoke(s.session_id)
            except Exception:
                log.exception("session=%s revoke failed", s.session_id)
            s.granted = False
            self._event(s, "revoked")
        self.sessions.pop(s.peer, None)

    def _alloc_radius_id(self) -> int | None:
        for _ in range(256):
            rid = self._next_radius_id
            self._next_radius_id = (rid + 1) % 256
            if rid not in self._pending:
                return rid
        return None

    # -- frontend ------------------------------------------------------------

    def handle_frontend_datagram(self, data: bytes, peer, now: float | None = None) -> list:
        try:
            frame = decode_eapoudp(data)
        except MalformedFrame:
            self.counters["malformed_frames"] += 1
            return []
        return self.handle_frontend_frame(frame, peer, now)

    def handle_frontend_frame(self, f: EapoUdpFrame, peer, now: float | None = None) -> list:
        now = self.clock() if now is None else now
        peer = tuple(peer)
        with self._lock:
            s = self.sessions.get(peer)
            if f.frame_type is FrameType.START:
                if s is not None:
                    self._event(s, "replaced")
                    self._teardown(s)
                s = CaSession(peer, f"{peer[0]}:{peer[1]}/{next(self._serial)}",
                              retransmit_budget=self.retransmit_budget)
                s.request_id = self.rng.randrange(256)
                self.sessions[peer] = s
                self._event(s, "start")
                return self._to_peer(s, _frame(EapPacket.request(s.request_id, EapType.IDENTITY)))

            if s is None:
                self.counters["ignored_frames"] += 1
                return []

            if f.frame_type is FrameType.LOGOFF:
                self._event(s, "logoff")
                self._teardown(s)
                # canned Failure confirms the port is closed and grants are gone
                return [ToPeer(peer, _frame(EapPacket.failure(s.request_id)))]

            if f.frame_type is not FrameType.EAP_PACKET:
                self.counters["ignored_frames"] += 1
                return []
            try:
                eap = decode_eap(f.body)
            except MalformedPacket:
                self.counters["malformed_frames"] += 1
                return []
            if eap.code is not EapCode.RESPONSE:
                self.counters["ignored_frames"] += 1
                return []

            if eap.identifier == s.answered_id:
                # supplicant retransmission: the AS exchange is either in flight
                # or already answered, in which case our last frames were lost
                if s.pending is None and s.last_out:
                    return [ToPeer(s.peer, d) for d in s.last_out]
                return []
            if s.terminal or s.pending is not None or eap.identifier != s.request_id:
                self.counters["ignored_frames"] += 1
                return []

            rid = self._alloc_radius_id()
            if rid is None:
                return self._fail(s, None, "radius-ids-exhausted", now)
            attrs = eap_attributes(f.body)
            if s.radius_state_token is not None:
                attrs.append(RadiusAttribute(STATE, s.radius_state_token))
            attrs += [RadiusAttribute(NAS_IDENTIFIER, self.nas_identifier),
                      RadiusAttribute(MESSAGE_AUTHENTICATOR, bytes(16))]
            req = RadiusPacket(RadiusCode.ACCESS_REQUEST, rid, secrets.token_bytes(16), attrs)
            wire = encode_radius(req, self.secret)
            s.pending = _Pending(rid, req.authenticator, wire)
            s.last_radius_id = rid
            s.timer_deadline = now + self.retransmit_interval
            s.answered_id = eap.identifier
            s.state = CaState.RELAYING
            self._pending[rid] = s
            self._event(s, "relay-to-as", radius_id=rid, eap_id=eap.identifier)
            return [ToServer(wire)]

    # -- backend -------------------------------------------------------------

    def handle_backend_datagram(self, data: bytes, now: float | None = None) -> list:
        if len(data) < 2:
            self.counters["dropped_responses"] += 1
            return []
        with self._lock:
            s = self._pending.get(data[1])
            if s is None:
                self.counters["dropped_responses"] += 1
                return []
            try:
                r = decode_radius(data, self.secret, expected_request_auth=s.pending.authenticator,
                                  require_message_authenticator=True)
            except RadiusError as exc:
                self.counters["dropped_responses"] += 1
                log.warning("session=%s dropping RADIUS reply: %s", s.session_id, exc)
                return []
            return self.handle_backend_response(r, s, now)

    def handle_backend_response(self, r: RadiusPacket, s: CaSession, now: float | None = None) -> list:
        now = self.clock() if now is None else now
        with self._lock:
            if s.pending is None or r.identifier != s.pending.radius_id:
                self.counters["dropped_responses"] += 1
                return []
            self._drop_pending(s)
            raw_eap = r.eap_bytes()
            eap = decode_eap(raw_eap) if raw_eap is not None else None

            if r.code is RadiusCode.ACCESS_CHALLENGE:
                if eap is None or eap.code is not EapCode.REQUEST:
                    return self._fail(s, None, "challenge-without-request", now)
                s.radius_state_token = r.first(STATE)
                s.request_id = eap.identifier
                self._event(s, "challenge", eap_id=eap.identifier)
                return self._to_peer(s, _frame(raw_eap))

            if r.code is RadiusCode.ACCESS_ACCEPT:
                if eap is None or eap.code is not EapCode.SUCCESS:
                    return self._fail(s, None, "accept-without-success", now)
                failure = encode_eap(EapPacket.failure(eap.identifier))
                vsas = _cazd_attributes(r.attributes)
                try:
                    cazd = parse_cazd(vsas)
                except CazdError as exc:
                    return self._fail(s, failure, f"bad-cazd({exc})", now)
                if cazd.rac_address is None:
                    return self._fail(s, failure, "accept-without-cazd", now)
                try:
                    self.enforcer.grant(s.session_id, cazd.rac_address, cazd.allowed_peers)
                except Exception as exc:
                    log.exception("session=%s enforcer grant failed", s.session_id)
                    try:
                        self.enforcer.revoke(s.session_id)
                    except Exception:
                        pass
                    return self._fail(s, failure, f"enforcer({exc})", now)
                s.granted = bool(cazd.allowed_peers)
                s.state = CaState.AUTHORIZED
                s.ended_at = now
                self._event(s, "authorized", rac=cazd.rac_address.compressed,
                            peers=len(cazd.allowed_peers))
                notify = encode_eapoudp(EapoUdpFrame(
                    FrameType.CAZD_NOTIFY, b"".join(a.encode() for a in vsas)))
                return self._to_peer(s, notify, _frame(raw_eap))

            # Access-Reject
            if eap is not None and eap.code is EapCode.FAILURE:
                return self._fail(s, raw_eap, "rejected", now)
            return self._fail(s, None, "rejected", now)

    # -- timers --------------------------------------------------------------

    def retransmit_tick(self, now: float | None = None) -> list:
        now = self.clock() if now is None else now
        out = []
        with self._lock:
            for s in list(self.sessions.values()):
                if s.pending is not None and s.timer_deadline is not None and now >= s.timer_deadline:
                    if s.pending.attempts >= s.retransmit_budget:
                        out += self._fail(s, None, "as-timeout", now)
                        continue
                    s.pending.attempts += 1
                    s.timer_deadline = now + self.retransmit_interval
                    self.counters["retransmits"] += 1
                    self._event(s, "retransmit", attempt=s.pending.attempts)
                    out.append(ToServer(s.pending.wire))
                elif (s.state is CaState.FAILED and s.ended_at is not None
                      and now - s.ended_at > FAILED_SESSION_TTL):
                    self.sessions.pop(s.peer, None)
        return out

    def session(self, peer) -> CaSession | None:
        with self._lock:
            return self.sessions.get(tuple(peer))


class CaService(UdpService):
    """Runs an :class:`Authenticator` on a frontend and a backend UDP socket."""

    role = "ca"

    def __init__(self, frontend_bind, as_addr, secret: bytes, enforcer, **kw):
        super().__init__(frontend_bind)
        self.as_addr = tuple(as_addr)
        self.core = Authenticator(secret, enforcer, **kw)
        wildcard = "::" if ":" in self.as_addr[0] else "0.0.0.0"
        try:
            self.backend = bind_udp((wildcard, 0), "ca-backend")
        except Exception:
            self.sock.close()
            raise
        self._backend_thread = None

    def start(self):
        super().start()
        self.backend.settimeout(self.poll_interval)
        self._backend_thread = threading.Thread(target=self._backend_loop, daemon=True,
                                                name="ca-backend")
        self._backend_thread.start()
        return self

    def _backend_loop(self):
        while not self._stop.is_set():
            try:
                data, _src = self.backend.recvfrom(65535)
            except socket.timeout:
                continue
            except OSError:
                break
            try:
                self._run(self.core.handle_backend_datagram(data))
            except Exception:
                log.exception("backend datagram handling failed")

    def _run(self, actions):
        for action in actions:
            if isinstance(action, ToPeer):
                self.sendto(action.data, action.peer)
            else:
                try:
                    self.backend.sendto(action.data, self.as_addr)
                except OSError as exc:
                    log.warning("send to AS failed: %s", exc)

    def handle_datagram(self, data: bytes, peer):
        self._run(self.core.handle_frontend_datagram(data, peer))

    def tick(self):
        self._run(self.core.retransmit_tick())

    def stop(self):
        super().stop()
        if self._backend_thread is not None:
            self._backend_thread.join(timeout=2)
        self.backend.close()
