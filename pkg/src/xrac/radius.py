"""RADIUS packet codec (RFC 2865 / RFC 3579) and the CAZD vendor attributes."""

from __future__ import annotations

import enum
import hashlib
import hmac
import ipaddress
import struct
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from xrac.eap import EapPacket, MalformedPacket as EapMalformed, decode_eap, encode_eap

__all__ = [
    "RadiusCode", "RadiusAttribute", "RadiusPacket", "CazdAttributes",
    "RadiusError", "MalformedPacket", "AuthenticatorMismatch", "CazdError",
    "encode_radius", "decode_radius", "parse_attribute_bytes", "build_cazd", "encode_cazd", "parse_cazd",
    "eap_attributes", "parse_peer", "format_peer",
    "USER_NAME", "VENDOR_SPECIFIC", "STATE", "NAS_IDENTIFIER", "EAP_MESSAGE",
    "MESSAGE_AUTHENTICATOR", "CAZD_VENDOR_ID",
]

HEADER = struct.Struct("!BBH16s")
MIN_LENGTH = 20
MAX_LENGTH = 4096
MAX_ATTR_VALUE = 253

USER_NAME = 1
VENDOR_SPECIFIC = 26
STATE = 24
NAS_IDENTIFIER = 32
EAP_MESSAGE = 79
MESSAGE_AUTHENTICATOR = 80

CAZD_VENDOR_ID = 65001
SUB_RAC_ADDRESS = 1
SUB_ALLOWED_PEER = 2
SUB_IMAGE_NAME = 3


class RadiusError(ValueError):
    pass


class MalformedPacket(RadiusError):
    pass


class AuthenticatorMismatch(RadiusError):
    """Authenticator or Message-Authenticator did not verify."""


class CazdError(RadiusError):
    pass


class RadiusCode(enum.IntEnum):
    ACCESS_REQUEST = 1
    ACCESS_ACCEPT = 2
    ACCESS_REJECT = 3
    ACCESS_CHALLENGE = 11

    @property
    def is_response(self) -> bool:
        return self is not RadiusCode.ACCESS_REQUEST


@dataclass(frozen=True)
class RadiusAttribute:
    attr_type: int
    value: bytes

    def __post_init__(self):
        if not 0 <= self.attr_type <= 255:
            raise ValueError(f"attribute type out of range: {self.attr_type}")
        if len(self.value) > MAX_ATTR_VALUE:
            raise ValueError(f"attribute {self.attr_type} value too long ({len(self.value)})")

    def encode(self) -> bytes:
        return bytes([self.attr_type, 2 + len(self.value)]) + self.value


@dataclass(frozen=True)
class RadiusPacket:
    code: RadiusCode
    identifier: int
    authenticator: bytes = bytes(16)
    attributes: tuple[RadiusAttribute, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "code", RadiusCode(self.code))
        object.__setattr__(self, "attributes", tuple(self.attributes))
        if not 0 <= self.identifier <= 255:
            raise ValueError(f"identifier out of range: {self.identifier}")
        if len(self.authenticator) != 16:
            raise ValueError("authenticator must be 16 bytes")

    def get(self, attr_type: int) -> list[bytes]:
        return [a.value for a in self.attributes if a.attr_type == attr_type]

    def first(self, attr_type: int) -> bytes | None:
        values = self.get(attr_type)
        return values[0] if values else None

    def eap_bytes(self) -> bytes | None:
        """Concatenated EAP-Message payload, exactly as carried."""
        chunks = self.get(EAP_MESSAGE)
        return b"".join(chunks) if chunks else None

    def eap_message(self) -> EapPacket | None:
        raw = self.eap_bytes()
        return None if raw is None else decode_eap(raw)


def eap_attributes(eap: EapPacket | bytes) -> list[RadiusAttribute]:
    """Split an EAP packet into EAP-Message attributes of at most 253 octets."""
    raw = eap if isinstance(eap, bytes) else encode_eap(eap)
    return [RadiusAttribute(EAP_MESSAGE, raw[i:i + MAX_ATTR_VALUE])
            for i in range(0, len(raw), MAX_ATTR_VALUE)]


def _check_eap_invariants(attributes: Sequence[RadiusAttribute], exc: type[Exception]):
    eap_chunks = [a.value for a in attributes if a.attr_type == EAP_MESSAGE]
    ma_count = sum(1 for a in attributes if a.attr_type == MESSAGE_AUTHENTICATOR)
    if ma_count > 1:
        raise exc("more than one Message-Authenticator")
    if eap_chunks:
        if not ma_count:
            raise exc("EAP-Message present without Message-Authenticator")
        try:
            decode_eap(b"".join(eap_chunks))
        except EapMalformed as e:
            raise exc(f"EAP-Message does not reassemble: {e}") from e


def encode_radius(p: RadiusPacket, secret: bytes,
                  request_authenticator: bytes | None = None) -> bytes:
    """Serialize and sign ``p``.

    Access-Request keeps ``p.authenticator`` (caller-chosen random). Responses
    need the authenticator of the request they answer; ``p.authenticator`` is
    then ignored and the response authenticator is computed. Any
    Message-Authenticator attribute value is replaced by the computed HMAC.
    """
    _check_eap_invariants(p.attributes, ValueError)
    if p.code.is_response and request_authenticator is None:
        raise ValueError("responses need the request authenticator")

    ma_offset = None
    body = bytearray()
    for attr in p.attributes:
        if attr.attr_type == MESSAGE_AUTHENTICATOR:
            ma_offset = MIN_LENGTH + len(body) + 2
            body += bytes([MESSAGE_AUTHENTICATOR, 18]) + bytes(16)
        else:
            body += attr.encode()
    length = MIN_LENGTH + len(body)
    if length > MAX_LENGTH:
        raise ValueError(f"packet too long ({length} > {MAX_LENGTH})")

    auth_field = request_authenticator if p.code.is_response else p.authenticator
    packet = bytearray(HEADER.pack(p.code, p.identifier, length, auth_field)) + body
    if ma_offset is not None:
        mac = hmac.new(secret, bytes(packet), hashlib.md5).digest()
        packet[ma_offset:ma_offset + 16] = mac
    if p.code.is_response:
        packet[4:20] = hashlib.md5(bytes(packet) + secret).digest()
    return bytes(packet)


def _parse_attributes(b: bytes, length: int) -> tuple[list[RadiusAttribute], int | None]:
    attrs = []
    ma_offset = None
    pos = MIN_LENGTH
    while pos < length:
        if length - pos < 2:
            raise MalformedPacket(f"truncated attribute header at offset {pos}")
        attr_type, attr_len = b[pos], b[pos + 1]
        if attr_len < 2 or pos + attr_len > length:
            raise MalformedPacket(f"bad attribute length {attr_len} at offset {pos}")
        if attr_type == MESSAGE_AUTHENTICATOR:
            if attr_len != 18:
                raise MalformedPacket("Message-Authenticator must be 16 octets")
            if ma_offset is not None:
                raise MalformedPacket("duplicate Message-Authenticator")
            ma_offset = pos + 2
        attrs.append(RadiusAttribute(attr_type, bytes(b[pos + 2:pos + attr_len])))
        pos += attr_len
    return attrs, ma_offset


def parse_attribute_bytes(b: bytes) -> list[RadiusAttribute]:
    """Decode a bare run of attribute TLVs (no RADIUS header)."""
    attrs, pos = [], 0
    while pos < len(b):
        if len(b) - pos < 2 or b[pos + 1] < 2 or pos + b[pos + 1] > len(b):
            raise MalformedPacket(f"bad attribute at offset {pos}")
        attrs.append(RadiusAttribute(b[pos], bytes(b[pos + 2:pos + b[pos + 1]])))
        pos += b[pos + 1]
    return attrs


def decode_radius(b: bytes, secret: bytes,
                  expected_request_auth: bytes | None = None, *,
                  require_message_authenticator: bool = False) -> RadiusPacket:
    """Parse and verify one RADIUS datagram.

    With ``expected_request_auth`` the response authenticator is checked over
    the raw datagram before anything else is trusted. Message-Authenticator,
    when present, is verified against ``expected_request_auth`` if given and
    against the packet's own authenticator field otherwise, so responses must
    be decoded with the request authenticator they answer.

    ``require_message_authenticator`` rejects packets lacking one. Without it
    an Access-Request carries no keyed check at all, so a corrupted attribute
    length that swallows EAP-Message and Message-Authenticator would go unseen.
    """
    if not MIN_LENGTH <= len(b) <= MAX_LENGTH:
        raise MalformedPacket(f"RADIUS datagram of {len(b)} octets")
    b = bytes(b)
    code, identifier, length, authenticator = HEADER.unpack_from(b)

    if expected_request_auth is not None:
        expected = hashlib.md5(b[:4] + expected_request_auth + b[20:] + secret).digest()
        if not hmac.compare_digest(expected, authenticator):
            raise AuthenticatorMismatch("response authenticator mismatch")

    if length != len(b):
        raise MalformedPacket(f"length field {length} != {len(b)} octets")
    try:
        code = RadiusCode(code)
    except ValueError:
        raise MalformedPacket(f"unsupported RADIUS code {code}") from None
    attrs, ma_offset = _parse_attributes(b, length)
    _check_eap_invariants(attrs, MalformedPacket)
    if require_message_authenticator and ma_offset is None:
        raise AuthenticatorMismatch("Message-Authenticator required but absent")

    if ma_offset is not None:
        auth_field = expected_request_auth if expected_request_auth is not None else authenticator
        zeroed = b[:4] + auth_field + b[20:ma_offset] + bytes(16) + b[ma_offset + 16:]
        mac = hmac.new(secret, zeroed, hashlib.md5).digest()
        if not hmac.compare_digest(mac, b[ma_offset:ma_offset + 16]):
            raise AuthenticatorMismatch("Message-Authenticator mismatch")
    return RadiusPacket(code, identifier, authenticator, tuple(attrs))


# -- CAZD vendor-specific attributes -------------------------------------------

Peer = ipaddress.IPv6Network


def parse_peer(text: str | Peer | ipaddress.IPv6Address) -> Peer:
    """Address or prefix as a network; a bare address becomes a /128."""
    if isinstance(text, ipaddress.IPv6Network):
        return text
    return ipaddress.IPv6Network(str(text), strict=False)


def format_peer(peer: Peer) -> str:
    if peer.prefixlen == 128:
        return peer.network_address.compressed
    return peer.compressed


@dataclass(frozen=True)
class CazdAttributes:
    rac_address: ipaddress.IPv6Address | None = None
    allowed_peers: tuple[Peer, ...] = ()
    image_name: str | None = None
    vendor_id: int = field(default=CAZD_VENDOR_ID, compare=False)

    def __post_init__(self):
        if self.rac_address is not None:
            object.__setattr__(self, "rac_address", ipaddress.IPv6Address(self.rac_address))
        object.__setattr__(self, "allowed_peers",
                           tuple(parse_peer(p) for p in self.allowed_peers))

    @property
    def empty(self) -> bool:
        return self.rac_address is None and not self.allowed_peers and self.image_name is None

    def to_json(self) -> dict:
        return {
            "rac": self.rac_address.compressed if self.rac_address else None,
            "peers": [format_peer(p) for p in self.allowed_peers],
            "image": self.image_name,
        }


def _sub(sub_type: int, data: bytes) -> bytes:
    if len(data) > MAX_ATTR_VALUE - 4 - 2:
        raise ValueError(f"CAZD sub-attribute {sub_type} too long")
    return bytes([sub_type, 2 + len(data)]) + data


def encode_cazd(cazd: CazdAttributes) -> list[RadiusAttribute]:
    """Pack CAZD into as few Vendor-Specific attributes as fit."""
    subs = []
    if cazd.rac_address is not None:
        subs.append(_sub(SUB_RAC_ADDRESS, cazd.rac_address.packed))
    for peer in cazd.allowed_peers:
        subs.append(_sub(SUB_ALLOWED_PEER, bytes([peer.prefixlen]) + peer.network_address.packed))
    if cazd.image_name is not None:
        subs.append(_sub(SUB_IMAGE_NAME, cazd.image_name.encode()))

    vendor = struct.pack("!I", CAZD_VENDOR_ID)
    attrs, current = [], b""
    for sub in subs:
        if len(vendor) + len(current) + len(sub) > MAX_ATTR_VALUE:
            attrs.append(RadiusAttribute(VENDOR_SPECIFIC, vendor + current))
            current = b""
        current += sub
    if current or not attrs:
        attrs.append(RadiusAttribute(VENDOR_SPECIFIC, vendor + current))
    return attrs


def build_cazd(rac_address, allowed_peers: Iterable, image_name: str) -> list[RadiusAttribute]:
    peers = tuple(allowed_peers)
    if not peers:
        raise ValueError("at least one allowed peer is required")
    return encode_cazd(CazdAttributes(rac_address, peers, image_name))


def parse_cazd(attrs: Iterable[RadiusAttribute]) -> CazdAttributes:
    """Collect CAZD from every Vendor-Specific attribute carrying our vendor id."""
    rac, peers, image = None, [], None
    for attr in attrs:
        if attr.attr_type != VENDOR_SPECIFIC or len(attr.value) < 4:
            continue
        (vendor,) = struct.unpack_from("!I", attr.value)
        if vendor != CAZD_VENDOR_ID:
            continue
        data, pos = attr.value, 4
        while pos < len(data):
            if len(data) - pos < 2:
                raise CazdError("truncated CAZD sub-attribute header")
            sub_type, sub_len = data[pos], data[pos + 1]
            if sub_len < 2 or pos + sub_len > len(data):
                raise CazdError(f"truncated CAZD sub-attribute {sub_type}")
            payload = data[pos + 2:pos + sub_len]
            if sub_type == SUB_RAC_ADDRESS:
                if len(payload) != 16:
                    raise CazdError("RacAddress must be 16 octets")
                rac = ipaddress.IPv6Address(payload)
            elif sub_type == SUB_ALLOWED_PEER:
                if len(payload) != 17 or payload[0] > 128:
                    raise CazdError("AllowedPeer must be prefix length + 16 octets")
                try:
                    peers.append(ipaddress.IPv6Network((payload[1:], payload[0])))
                except ValueError as exc:
                    raise CazdError(str(exc)) from exc
            elif sub_type == SUB_IMAGE_NAME:
                try:
                    image = payload.decode()
                except UnicodeDecodeError as exc:
                    raise CazdError("ImageName is not UTF-8") from exc
            pos += sub_len
    return CazdAttributes(rac, tuple(peers), image)
