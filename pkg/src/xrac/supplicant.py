"""Container supplicant: frontend EAPoUDP authentication for one container start."""

from __future__ import annotations

import enum
import logging
import socket
import time
from dataclasses import dataclass, field

from xrac import eap as eapmod
from xrac.eap import (
    ContainerIdentity, EapCode, EapoUdpFrame, EapPacket, EapType, FrameType,
    decode_eap, decode_eapoudp, encode_container_identity, encode_eapoudp,
)
from xrac.radius import CazdAttributes, RadiusError, parse_attribute_bytes, parse_cazd

__all__ = ["CsState", "CsSession", "CsResult", "Supplicant", "run_cs_session"]

log = logging.getLogger("xrac.cs")

TIMEOUT = 2.0
RETRANSMIT_BUDGET = 3
# the authenticator gives up on the AS at the same moment we would give up on
# it; the extra wait lets its Failure arrive first so denials are classified
FINAL_GRACE = 0.5


class CsState(enum.Enum):
    IDLE = "Idle"
    START_SENT = "StartSent"
    IDENTITY_SENT = "IdentitySent"
    CHALLENGE_ANSWERED = "ChallengeAnswered"
    AUTHORIZED = "Authorized"
    FAILED = "Failed"


def _eap_frame(packet: EapPacket) -> bytes:
    return encode_eapoudp(EapoUdpFrame.wrap(packet))


class CsSession:
    """Supplicant side of one conversation; feed it frames and timeouts."""

    def __init__(self, identity: ContainerIdentity, password: bytes, *,
                 timeout: float = TIMEOUT, retransmit_budget: int = RETRANSMIT_BUDGET,
                 final_grace: float = FINAL_GRACE):
        self.identity = identity
        self.identity_text = encode_container_identity(identity).encode()
        self.password = password
        self.timeout = timeout
        self.retransmit_budget = retransmit_budget
        self.final_grace = final_grace
        self.state = CsState.IDLE
        self.cazd: CazdAttributes | None = None
        self.reason: str | None = None
        self.success_seen = False
        self.deadline: float | None = None
        self._last: list[bytes] = []
        self._attempts = 0

    @property
    def terminal(self) -> bool:
        return self.state in (CsState.AUTHORIZED, CsState.FAILED)

    def _send(self, now: float, *frames: bytes) -> list[bytes]:
        self._last = list(frames)
        self._attempts = 1
        self._arm(now)
        return list(frames)

    def _arm(self, now: float):
        final = self._attempts >= self.retransmit_budget
        self.deadline = now + self.timeout + (self.final_grace if final else 0.0)

    def _fail(self, reason: str) -> list[bytes]:
        answered = self.state is CsState.CHALLENGE_ANSWERED
        self.state = CsState.FAILED
        self.reason = reason
        self.deadline = None
        if answered and reason != "rejected":
            # the authenticator may already hold grants for us; release them
            return [encode_eapoudp(EapoUdpFrame.logoff())]
        return []

    def start(self, now: float) -> list[bytes]:
        if self.state is not CsState.IDLE:
            raise RuntimeError("session already started")
        self.state = CsState.START_SENT
        return self._send(now, encode_eapoudp(EapoUdpFrame.start()))

    def on_datagram(self, data: bytes, now: float) -> list[bytes]:
        try:
            frame = decode_eapoudp(data)
        except eapmod.MalformedFrame:
            return []
        return self.on_frame(frame, now)

    def on_frame(self, frame: EapoUdpFrame, now: float) -> list[bytes]:
        if self.terminal:
            return []
        if frame.frame_type is FrameType.CAZD_NOTIFY:
            return self._on_cazd(frame.body, now)
        if frame.frame_type is not FrameType.EAP_PACKET:
            return []
        try:
            eap = decode_eap(frame.body)
        except eapmod.MalformedPacket:
            return []

        if eap.code is EapCode.FAILURE:
            return self._fail("rejected")
        if eap.code is EapCode.SUCCESS:
            if self.state is not CsState.CHALLENGE_ANSWERED:
                return self._fail("unexpected-success")
            self.success_seen = True
            if self.cazd is not None:
                return self._authorize()
            # Success alone grants nothing; CAZD must follow within one timeout
            self.deadline = now + self.timeout
            return []
        if eap.code is not EapCode.REQUEST:
            return []

        if eap.type_field == EapType.IDENTITY:
            if self.state not in (CsState.START_SENT, CsState.IDENTITY_SENT):
                return []
            self.state = CsState.IDENTITY_SENT
            return self._send(now, _eap_frame(
                EapPacket.response(eap.identifier, EapType.IDENTITY, self.identity_text)))

        if self.state not in (CsState.IDENTITY_SENT, CsState.CHALLENGE_ANSWERED) or self.success_seen:
            return []
        if eap.type_field == EapType.MD5_CHALLENGE:
            try:
                challenge, _name = eapmod.parse_md5_challenge_data(eap.type_data)
            except eapmod.MalformedPacket:
                return []
            value = eapmod.md5_challenge_response(eap.identifier, self.password, challenge)
            self.state = CsState.CHALLENGE_ANSWERED
            return self._send(now, _eap_frame(EapPacket.response(
                eap.identifier, EapType.MD5_CHALLENGE, eapmod.md5_challenge_data(value))))
        # any other method: propose MD5-Challenge instead
        return self._send(now, _eap_frame(
            EapPacket.response(eap.identifier, EapType.NAK, bytes([EapType.MD5_CHALLENGE]))))

    def _on_cazd(self, body: bytes, now: float) -> list[bytes]:
        if self.state is not CsState.CHALLENGE_ANSWERED:
            return []
        try:
            cazd = parse_cazd(parse_attribute_bytes(body))
        except RadiusError:
            return self._fail("bad-cazd")
        if cazd.rac_address != self.identity.rac_address:
            return self._fail("cazd-address-mismatch")
        self.cazd = cazd
        if self.success_seen:
            return self._authorize()
        return []

    def _authorize(self) -> list[bytes]:
        self.state = CsState.AUTHORIZED
        self.deadline = None
        return []

    def on_timeout(self, now: float) -> list[bytes]:
        if self.terminal or self.deadline is None or now < self.deadline:
            return []
        if self.success_seen:
            return self._fail("cazd-missing")
        if self._attempts >= self.retransmit_budget:
            return self._fail("timeout")
        self._attempts += 1
        self._arm(now)
        return list(self._last)


@dataclass
class CsResult:
    authorized: bool
    cazd: CazdAttributes | None = None
    reason: str | None = None
    elapsed: float = 0.0
    supplicant: Supplicant | None = field(default=None, repr=False)

    @property
    def deny_reason(self) -> str | None:
        if self.authorized:
            return None
        return "timeout" if self.reason == "timeout" else "aa-failed"


class Supplicant:
    """A UDP socket toward the authenticator; stays open until logoff."""

    def __init__(self, ca_addr, *, timeout: float = TIMEOUT,
                 retransmit_budget: int = RETRANSMIT_BUDGET, final_grace: float = FINAL_GRACE):
        self.ca_addr = tuple(ca_addr)
        self.timeout = timeout
        self.retransmit_budget = retransmit_budget
        self.final_grace = final_grace
        family = socket.AF_INET6 if ":" in self.ca_addr[0] else socket.AF_INET
        self.sock = socket.socket(family, socket.SOCK_DGRAM)
        self.sock.connect(self.ca_addr)
        self.session: CsSession | None = None

    def _send_all(self, frames):
        for frame in frames:
            try:
                self.sock.send(frame)
            except OSError as exc:
                # ICMP port unreachable from an earlier send; keep retrying
                log.debug("send to CA failed: %s", exc)

    def _recv(self, deadline: float) -> bytes | None:
        wait = deadline - time.monotonic()
        if wait <= 0:
            return None
        self.sock.settimeout(wait)
        try:
            return self.sock.recv(65535)
        except socket.timeout:
            return None
        except ConnectionRefusedError:
            # nothing listening yet; behave like a lost datagram
            time.sleep(min(0.05, max(0.0, deadline - time.monotonic())))
            return b""

    def authenticate(self, identity: ContainerIdentity, password: bytes) -> CsResult:
        t0 = time.monotonic()
        s = self.session = CsSession(identity, password, timeout=self.timeout,
                                     retransmit_budget=self.retransmit_budget,
                                     final_grace=self.final_grace)
        self._send_all(s.start(time.monotonic()))
        while not s.terminal:
            data = self._recv(s.deadline)
            now = time.monotonic()
            if data:
                self._send_all(s.on_datagram(data, now))
            else:
                self._send_all(s.on_timeout(now))
        return CsResult(s.state is CsState.AUTHORIZED, s.cazd, s.reason,
                        time.monotonic() - t0, self if s.state is CsState.AUTHORIZED else None)

    def logoff(self) -> bool:
        """Send Logoff and wait for the authenticator's canned Failure."""
        frame = encode_eapoudp(EapoUdpFrame.logoff())
        for _ in range(self.retransmit_budget):
            self._send_all([frame])
            deadline = time.monotonic() + self.timeout
            while True:
                data = self._recv(deadline)
                if data is None:
                    break
                try:
                    reply = decode_eapoudp(data)
                    if reply.frame_type is FrameType.EAP_PACKET and \
                            decode_eap(reply.body).code is EapCode.FAILURE:
                        return True
                except (eapmod.MalformedFrame, eapmod.MalformedPacket):
                    continue
        return False

    def close(self):
        self.sock.close()


def run_cs_session(ci: ContainerIdentity, password: bytes, ca_addr, **kw) -> CsResult:
    """Authenticate ``ci``; on success the result keeps the supplicant for logoff."""
    supplicant = Supplicant(ca_addr, **kw)
    try:
        result = supplicant.authenticate(ci, password)
    except BaseException:
        supplicant.close()
        raise
    if not result.authorized:
        supplicant.close()
    return result
