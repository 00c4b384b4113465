"""EAP packets, EAPoUDP framing, MD5-Challenge and container identity strings.

EAP layout (RFC 3748)::

     0                   1                   2                   3
     0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1 2 3 4 5 6 7 8 9 0 1
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |     Code      |  Identifier   |            Length             |
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+
    |     Type      |  Type-Data ...
    +-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-+-

EAPoUDP reuses the EAPoL header shape: version(1) type(1) body-length(2).
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import struct
from dataclasses import dataclass

__all__ = [
    "EapCode", "EapType", "FrameType", "EapPacket", "EapoUdpFrame",
    "ContainerIdentity", "MalformedPacket", "MalformedFrame", "ParseError",
    "encode_eap", "decode_eap", "encode_eapoudp", "decode_eapoudp",
    "md5_challenge_response", "md5_challenge_data", "parse_md5_challenge_data",
    "encode_container_identity", "parse_container_identity",
]

EAP_HEADER = struct.Struct("!BBH")
EAPOUDP_HEADER = struct.Struct("!BBH")
EAPOUDP_VERSION = 1
MAX_TYPE_DATA = 0xFFFF - 5


class MalformedPacket(ValueError):
    pass


class MalformedFrame(ValueError):
    pass


class ParseError(ValueError):
    pass


class EapCode(enum.IntEnum):
    REQUEST = 1
    RESPONSE = 2
    SUCCESS = 3
    FAILURE = 4


class EapType(enum.IntEnum):
    IDENTITY = 1
    NOTIFICATION = 2
    NAK = 3
    MD5_CHALLENGE = 4


class FrameType(enum.IntEnum):
    EAP_PACKET = 0
    START = 1
    LOGOFF = 2
    # carries CAZD vendor attributes from the authenticator to the supplicant
    CAZD_NOTIFY = 3


@dataclass(frozen=True)
class EapPacket:
    code: EapCode
    identifier: int
    type_field: int | None = None
    type_data: bytes = b""

    def __post_init__(self):
        object.__setattr__(self, "code", EapCode(self.code))
        if not 0 <= self.identifier <= 255:
            raise ValueError(f"identifier out of range: {self.identifier}")
        if self.code in (EapCode.REQUEST, EapCode.RESPONSE):
            if self.type_field is None or not 0 <= self.type_field <= 255:
                raise ValueError("Request/Response packets need a type 0-255")
        elif self.type_field is not None or self.type_data:
            raise ValueError("Success/Failure packets carry no type or data")

    @classmethod
    def request(cls, identifier: int, eap_type: int, data: bytes = b"") -> EapPacket:
        return cls(EapCode.REQUEST, identifier, eap_type, data)

    @classmethod
    def response(cls, identifier: int, eap_type: int, data: bytes = b"") -> EapPacket:
        return cls(EapCode.RESPONSE, identifier, eap_type, data)

    @classmethod
    def success(cls, identifier: int) -> EapPacket:
        return cls(EapCode.SUCCESS, identifier)

    @classmethod
    def failure(cls, identifier: int) -> EapPacket:
        return cls(EapCode.FAILURE, identifier)

    @property
    def length(self) -> int:
        if self.type_field is None:
            return 4
        return 5 + len(self.type_data)


def encode_eap(p: EapPacket) -> bytes:
    if len(p.type_data) > MAX_TYPE_DATA:
        raise ValueError(f"type_data too long ({len(p.type_data)} bytes)")
    head = EAP_HEADER.pack(p.code, p.identifier, p.length)
    if p.type_field is None:
        return head
    return head + bytes([p.type_field]) + p.type_data


def decode_eap(b: bytes) -> EapPacket:
    """Strictly decode one EAP packet; trailing octets are an error."""
    if len(b) < 4:
        raise MalformedPacket(f"EAP packet too short ({len(b)} bytes)")
    code, identifier, length = EAP_HEADER.unpack_from(b)
    if length != len(b):
        raise MalformedPacket(f"EAP length field {length} != {len(b)} octets")
    try:
        code = EapCode(code)
    except ValueError:
        raise MalformedPacket(f"unknown EAP code {code}") from None
    if code in (EapCode.SUCCESS, EapCode.FAILURE):
        if length != 4:
            raise MalformedPacket("Success/Failure must be exactly 4 octets")
        return EapPacket(code, identifier)
    if length < 5:
        raise MalformedPacket("Request/Response without type octet")
    return EapPacket(code, identifier, b[4], bytes(b[5:]))


@dataclass(frozen=True)
class EapoUdpFrame:
    frame_type: FrameType
    body: bytes = b""
    version: int = EAPOUDP_VERSION

    def __post_init__(self):
        object.__setattr__(self, "frame_type", FrameType(self.frame_type))
        if self.version != EAPOUDP_VERSION:
            raise ValueError(f"unsupported EAPoUDP version {self.version}")
        if len(self.body) > 0xFFFF:
            raise ValueError("EAPoUDP body too long")
        if self.frame_type in (FrameType.START, FrameType.LOGOFF) and self.body:
            raise ValueError(f"{self.frame_type.name} frames have no body")

    @property
    def body_length(self) -> int:
        return len(self.body)

    @classmethod
    def start(cls) -> EapoUdpFrame:
        return cls(FrameType.START)

    @classmethod
    def logoff(cls) -> EapoUdpFrame:
        return cls(FrameType.LOGOFF)

    @classmethod
    def wrap(cls, packet: EapPacket | bytes) -> EapoUdpFrame:
        body = packet if isinstance(packet, bytes) else encode_eap(packet)
        return cls(FrameType.EAP_PACKET, body)

    def eap(self) -> EapPacket:
        if self.frame_type is not FrameType.EAP_PACKET:
            raise MalformedFrame(f"{self.frame_type.name} frame carries no EAP packet")
        try:
            return decode_eap(self.body)
        except MalformedPacket as exc:
            raise MalformedFrame(str(exc)) from exc


def encode_eapoudp(f: EapoUdpFrame) -> bytes:
    return EAPOUDP_HEADER.pack(f.version, f.frame_type, f.body_length) + f.body


def decode_eapoudp(b: bytes) -> EapoUdpFrame:
    if len(b) < 4:
        raise MalformedFrame(f"EAPoUDP frame too short ({len(b)} bytes)")
    version, frame_type, length = EAPOUDP_HEADER.unpack_from(b)
    if version != EAPOUDP_VERSION:
        raise MalformedFrame(f"bad EAPoUDP version {version}")
    try:
        frame_type = FrameType(frame_type)
    except ValueError:
        raise MalformedFrame(f"unknown EAPoUDP frame type {frame_type}") from None
    if length != len(b) - 4:
        raise MalformedFrame(f"EAPoUDP body length {length} != {len(b) - 4}")
    if frame_type in (FrameType.START, FrameType.LOGOFF) and length:
        raise MalformedFrame(f"{frame_type.name} frame with non-empty body")
    frame = EapoUdpFrame(frame_type, bytes(b[4:]))
    if frame_type is FrameType.EAP_PACKET:
        frame.eap()  # the nested length must agree too
    return frame


def md5_challenge_response(identifier: int, password: bytes, challenge: bytes) -> bytes:
    """CHAP-style response: MD5(identifier || password || challenge)."""
    if not 1 <= len(challenge) <= 255:
        raise ValueError("challenge must be 1-255 octets")
    if not 0 <= identifier <= 255:
        raise ValueError(f"identifier out of range: {identifier}")
    return hashlib.md5(bytes([identifier]) + password + challenge).digest()


def md5_challenge_data(value: bytes, name: bytes = b"") -> bytes:
    # MD5-Challenge type data: Value-Size(1) Value Name
    if not 1 <= len(value) <= 255:
        raise ValueError("MD5-Challenge value must be 1-255 octets")
    return bytes([len(value)]) + value + name


def parse_md5_challenge_data(data: bytes) -> tuple[bytes, bytes]:
    if not data or data[0] == 0 or len(data) < 1 + data[0]:
        raise MalformedPacket("truncated MD5-Challenge value")
    size = data[0]
    return bytes(data[1:1 + size]), bytes(data[1 + size:])


_CI_KEYS = ("user", "image", "digest", "addr")
DIGEST_PREFIX = "sha256:"


@dataclass(frozen=True)
class ContainerIdentity:
    """User and container authentication data sent in the EAP Identity."""

    user_name: str
    image_name: str
    image_digest: bytes
    rac_address: ipaddress.IPv6Address
    digest_alg: str = "sha256"

    def __post_init__(self):
        object.__setattr__(self, "rac_address", ipaddress.IPv6Address(self.rac_address))
        if self.digest_alg != "sha256":
            raise ValueError(f"unsupported digest algorithm {self.digest_alg!r}")
        if len(self.image_digest) != 32:
            raise ValueError("image digest must be 32 bytes")
        for label, value in (("user", self.user_name), ("image", self.image_name)):
            if not value:
                raise ValueError(f"empty {label} field")
            if ";" in value:
                raise ValueError(f"{label} field contains ';'")


def encode_container_identity(ci: ContainerIdentity) -> str:
    return (f"user={ci.user_name};image={ci.image_name};"
            f"digest={DIGEST_PREFIX}{ci.image_digest.hex()};addr={ci.rac_address.compressed}")


def parse_container_identity(t: str) -> ContainerIdentity:
    fields = {}
    for part in t.split(";"):
        key, sep, value = part.partition("=")
        if not sep or key not in _CI_KEYS:
            raise ParseError(f"unexpected field {part!r}")
        if key in fields:
            raise ParseError(f"duplicate field {key!r}")
        fields[key] = value
    missing = [k for k in _CI_KEYS if k not in fields]
    if missing:
        raise ParseError(f"missing fields: {', '.join(missing)}")

    digest = fields["digest"]
    if not digest.startswith(DIGEST_PREFIX):
        raise ParseError(f"digest must start with {DIGEST_PREFIX!r}")
    hexpart = digest[len(DIGEST_PREFIX):]
    if len(hexpart) != 64:
        raise ParseError(f"digest must be 64 hex characters, got {len(hexpart)}")
    if hexpart != hexpart.lower():
        raise ParseError("digest hex must be lowercase")
    try:
        raw = bytes.fromhex(hexpart)
        addr = ipaddress.IPv6Address(fields["addr"])
        return ContainerIdentity(fields["user"], fields["image"], raw, addr)
    except ValueError as exc:
        raise ParseError(str(exc)) from exc
