"""Authentication server: EAP Identity + MD5-Challenge over RADIUS.

Access is granted only when the user proves the password, the image digest
matches the RAC profile and some group lets the user run the image.
"""

from __future__ import annotations

import enum
import hmac
import logging
import secrets
import threading
import time
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

from xrac import eap as eapmod
from xrac.eap import ContainerIdentity, EapCode, EapPacket, EapType
from xrac.net import UdpService, format_hostport
from xrac.radius import (
    MESSAGE_AUTHENTICATOR, STATE, AuthenticatorMismatch, RadiusAttribute, RadiusCode, RadiusError, RadiusPacket,
    decode_radius, eap_attributes, encode_cazd, encode_radius,
)
from xrac.store import AaStore, cazd_for, load_store, permitted, verify_image, verify_user

__all__ = ["AuthServer", "AsService", "AsConversation", "ConversationState", "Decision"]

log = logging.getLogger("xrac.as")

CONVERSATION_TIMEOUT = 30.0
CHALLENGE_LEN = 16


class ConversationState(enum.Enum):
    AWAIT_IDENTITY = "AwaitIdentity"
    AWAIT_MD5_RESPONSE = "AwaitMd5Response"
    DONE = "Done"


@dataclass
class AsConversation:
    container_identity: ContainerIdentity
    challenge: bytes
    opaque_state_token: bytes
    eap_identifier: int
    state: ConversationState = ConversationState.AWAIT_MD5_RESPONSE
    last_seen: float = 0.0


@dataclass(frozen=True)
class Decision:
    user: str | None
    image: str | None
    outcome: str
    reason: str

    def log_line(self) -> str:
        return (f"decision user={self.user or '-'} image={self.image or '-'} "
                f"outcome={self.outcome} reason={self.reason}")


def _ma() -> RadiusAttribute:
    return RadiusAttribute(MESSAGE_AUTHENTICATOR, bytes(16))


class AuthServer:
    """Transport-free AS logic; one instance serves many conversations."""

    def __init__(self, store: AaStore, *, timeout: float = CONVERSATION_TIMEOUT,
                 clock=time.monotonic, random_bytes=secrets.token_bytes):
        self._store = store
        self.timeout = timeout
        self.clock = clock
        self.random_bytes = random_bytes
        self._lock = threading.Lock()
        # ordered by last_seen so expiry only looks at the stale front
        self._conversations: OrderedDict[bytes, AsConversation] = OrderedDict()
        self.decisions: list[Decision] = []

    @property
    def store(self) -> AaStore:
        return self._store

    def reload(self, store: AaStore):
        self._store = store

    def _decide(self, decision: Decision):
        self.decisions.append(decision)
        log.info(decision.log_line())

    def _reject(self, req: RadiusPacket, eap_id: int, decision: Decision) -> RadiusPacket:
        self._decide(decision)
        attrs = eap_attributes(EapPacket.failure(eap_id)) + [_ma()]
        return RadiusPacket(RadiusCode.ACCESS_REJECT, req.identifier, attributes=attrs)

    def _expire(self, now: float):
        while self._conversations:
            token, conv = next(iter(self._conversations.items()))
            if now - conv.last_seen <= self.timeout:
                break
            del self._conversations[token]

    def handle_access_request(self, req: RadiusPacket) -> RadiusPacket:
        try:
            eap = req.eap_message()
        except eapmod.MalformedPacket:
            eap = None
        if req.code is not RadiusCode.ACCESS_REQUEST or eap is None or eap.code is not EapCode.RESPONSE:
            return self._reject(req, eap.identifier if eap else 0,
                                Decision(None, None, "reject", "protocol"))
        token = req.first(STATE)
        now = self.clock()
        with self._lock:
            self._expire(now)
            if token is None:
                return self._on_identity(req, eap, now)
            conv = self._conversations.get(token)
            if conv is None:
                return self._reject(req, eap.identifier, Decision(None, None, "reject", "state"))
            if conv.state is not ConversationState.AWAIT_MD5_RESPONSE:
                ci = conv.container_identity
                return self._reject(req, eap.identifier,
                                    Decision(ci.user_name, ci.image_name, "reject", "replay"))
            conv.state = ConversationState.DONE
            conv.last_seen = now
            self._conversations.move_to_end(token)
        return self._on_md5_response(req, eap, conv)

    def _on_identity(self, req: RadiusPacket, eap: EapPacket, now: float) -> RadiusPacket:
        if eap.type_field != EapType.IDENTITY:
            return self._reject(req, eap.identifier, Decision(None, None, "reject", "protocol"))
        try:
            ci = eapmod.parse_container_identity(eap.type_data.decode("utf-8"))
        except (UnicodeDecodeError, eapmod.ParseError):
            return self._reject(req, eap.identifier, Decision(None, None, "reject", "identity"))

        token = self.random_bytes(16)
        while token in self._conversations:
            token = self.random_bytes(16)
        conv = AsConversation(ci, self.random_bytes(CHALLENGE_LEN), token,
                              (eap.identifier + 1) % 256, last_seen=now)
        self._conversations[token] = conv
        challenge = EapPacket.request(conv.eap_identifier, EapType.MD5_CHALLENGE,
                                      eapmod.md5_challenge_data(conv.challenge))
        attrs = eap_attributes(challenge) + [RadiusAttribute(STATE, token), _ma()]
        return RadiusPacket(RadiusCode.ACCESS_CHALLENGE, req.identifier, attributes=attrs)

    def _on_md5_response(self, req: RadiusPacket, eap: EapPacket,
                         conv: AsConversation) -> RadiusPacket:
        ci = conv.container_identity
        failure_id = conv.eap_identifier
        if eap.identifier != conv.eap_identifier or eap.type_field != EapType.MD5_CHALLENGE:
            return self._reject(req, failure_id,
                                Decision(ci.user_name, ci.image_name, "reject", "protocol"))
        try:
            response, _name = eapmod.parse_md5_challenge_data(eap.type_data)
        except eapmod.MalformedPacket:
            return self._reject(req, failure_id,
                                Decision(ci.user_name, ci.image_name, "reject", "protocol"))

        store = self._store

        def proof_ok(password: bytes) -> bool:
            expected = eapmod.md5_challenge_response(conv.eap_identifier, password, conv.challenge)
            return hmac.compare_digest(expected, response)

        user_ok = verify_user(store, ci.user_name, proof_ok)
        image_ok = verify_image(store, ci.image_name, ci.image_digest)
        allowed = permitted(store, ci.user_name, ci.image_name)
        if not (user_ok and image_ok and allowed):
            reason = "user" if not user_ok else "image" if not image_ok else "permission"
            return self._reject(req, failure_id,
                                Decision(ci.user_name, ci.image_name, "reject", reason))

        cazd = cazd_for(store, ci.image_name, ci.rac_address)
        self._decide(Decision(ci.user_name, ci.image_name, "accept", "ok"))
        attrs = eap_attributes(EapPacket.success(failure_id)) + encode_cazd(cazd) + [_ma()]
        return RadiusPacket(RadiusCode.ACCESS_ACCEPT, req.identifier, attributes=attrs)

    def conversation_count(self) -> int:
        with self._lock:
            return len(self._conversations)


@dataclass
class _Counters:
    received: int = 0
    malformed: int = 0
    bad_authenticator: int = 0
    duplicates: int = 0
    replies: int = 0


class AsService(UdpService):
    """RADIUS over UDP in front of an :class:`AuthServer`."""

    role = "as"
    CACHE_SIZE = 4096

    def __init__(self, bind: tuple[str, int], secret: bytes, store_path=None, *,
                 store: AaStore | None = None, log_path=None, **server_kw):
        if store is None:
            store = load_store(store_path)
        self.store_path = Path(store_path) if store_path else None
        self.secret = secret
        self.server = AuthServer(store, **server_kw)
        self.counters = _Counters()
        self._cache: OrderedDict = OrderedDict()
        self._cache_lock = threading.Lock()
        self._log_handler = None
        if log_path:
            self._log_handler = logging.FileHandler(log_path)
            self._log_handler.setFormatter(logging.Formatter("%(asctime)s %(message)s"))
            log.addHandler(self._log_handler)
            log.setLevel(logging.INFO)
        super().__init__(bind)
        log.debug("AS listening on %s", format_hostport(self.address))

    def reload(self, store: AaStore | None = None):
        """Swap in a freshly loaded store; conversations keep running."""
        if store is None:
            store = load_store(self.store_path)
        self.server.reload(store)
        log.info("store reloaded users=%d racs=%d groups=%d",
                 len(store.users), len(store.racs), len(store.groups))

    def handle_datagram(self, data: bytes, peer):
        self.counters.received += 1
        try:
            req = decode_radius(data, self.secret, require_message_authenticator=True)
        except AuthenticatorMismatch as exc:
            self.counters.bad_authenticator += 1
            log.debug("dropping datagram from %s: %s", peer, exc)
            return
        except RadiusError as exc:
            self.counters.malformed += 1
            log.debug("dropping datagram from %s: %s", peer, exc)
            return
        if req.code is not RadiusCode.ACCESS_REQUEST:
            self.counters.malformed += 1
            return
        key = (peer, req.identifier, req.authenticator)
        with self._cache_lock:
            cached = self._cache.get(key)
        if cached is not None:
            self.counters.duplicates += 1
            self.sendto(cached, peer)
            return
        reply = self.server.handle_access_request(req)
        wire = encode_radius(reply, self.secret, request_authenticator=req.authenticator)
        with self._cache_lock:
            self._cache[key] = wire
            while len(self._cache) > self.CACHE_SIZE:
                self._cache.popitem(last=False)
        self.counters.replies += 1
        self.sendto(wire, peer)

    def stop(self):
        super().stop()
        if self._log_handler is not None:
            log.removeHandler(self._log_handler)
            self._log_handler.close()
