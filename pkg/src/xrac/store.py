"""User profiles, RAC profiles and group bindings of the authentication server.

The store is read from a small brace-structured text file::

    # users authenticate with MD5-Challenge, so the cleartext is stored
    user alice { password = "wonderland" }
    rac wget {
        digest = "sha256:9f86d081884c7d659a2feaa0c55ad015a3bf4f1b2b0b822cd15d6c15b0f00a08"
        allow = "2001:db8::aa:0"
    }
    group staff { users = [alice] images = [wget] }
"""

from __future__ import annotations

import ipaddress
import re
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Callable, Mapping

from xrac.radius import CazdAttributes, Peer, format_peer, parse_peer

__all__ = [
    "UserProfile", "RacProfile", "GroupBinding", "AaStore",
    "StoreParseError", "DanglingReference", "UnknownImage",
    "load_store", "parse_store", "dump_store",
    "verify_user", "verify_image", "permitted", "cazd_for",
]


class StoreParseError(ValueError):
    pass


class DanglingReference(StoreParseError):
    def __init__(self, name: str, where: str = ""):
        self.name = name
        super().__init__(f"{where}unknown reference {name!r}" if where else name)


class UnknownImage(KeyError):
    pass


@dataclass(frozen=True)
class UserProfile:
    user_name: str
    password: bytes = field(repr=False)


@dataclass(frozen=True)
class RacProfile:
    image_name: str
    image_digest: bytes
    allowed_peers: tuple[Peer, ...] = ()

    def __post_init__(self):
        if len(self.image_digest) != 32:
            raise ValueError(f"rac {self.image_name}: digest must be 32 bytes")
        object.__setattr__(self, "allowed_peers",
                           tuple(parse_peer(p) for p in self.allowed_peers))


@dataclass(frozen=True)
class GroupBinding:
    group_name: str
    members: frozenset[str]
    permitted_images: frozenset[str]


@dataclass(frozen=True)
class AaStore:
    users: Mapping[str, UserProfile] = field(default_factory=dict)
    racs: Mapping[str, RacProfile] = field(default_factory=dict)
    groups: tuple[GroupBinding, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "users", MappingProxyType(dict(self.users)))
        object.__setattr__(self, "racs", MappingProxyType(dict(self.racs)))
        object.__setattr__(self, "groups", tuple(self.groups))
        for g in self.groups:
            for name in g.members:
                if name not in self.users:
                    raise DanglingReference(name, f"group {g.group_name}: ")
            for name in g.permitted_images:
                if name not in self.racs:
                    raise DanglingReference(name, f"group {g.group_name}: ")

    @classmethod
    def build(cls, users=(), racs=(), groups=()) -> AaStore:
        return cls({u.user_name: u for u in users}, {r.image_name: r for r in racs}, groups)


def verify_user(store: AaStore, user_name: str, check: Callable[[bytes], bool]) -> bool:
    """True iff the user exists and ``check(stored_password)`` holds."""
    profile = store.users.get(user_name)
    if profile is None:
        return False
    try:
        return bool(check(profile.password))
    except Exception:
        return False


def verify_image(store: AaStore, image_name: str, digest: bytes) -> bool:
    profile = store.racs.get(image_name)
    return profile is not None and profile.image_digest == bytes(digest)


def permitted(store: AaStore, user_name: str, image_name: str) -> bool:
    return any(user_name in g.members and image_name in g.permitted_images
               for g in store.groups)


def cazd_for(store: AaStore, image_name: str, rac_address) -> CazdAttributes:
    profile = store.racs.get(image_name)
    if profile is None:
        raise UnknownImage(image_name)
    return CazdAttributes(ipaddress.IPv6Address(rac_address), profile.allowed_peers, image_name)


# -- config file ---------------------------------------------------------------

_TOKEN = re.compile(r"""
    (?P<ws>\s+)
  | (?P<comment>\#[^\n]*)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<punct>[{}\[\]=,])
  | (?P<word>[^\s{}\[\]=,"#]+)
""", re.VERBOSE)


def _tokenize(text: str):
    pos, line = 0, 1
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise StoreParseError(f"line {line}: unexpected character {text[pos]!r}")
        kind = m.lastgroup
        value = m.group()
        if kind == "string":
            yield "string", re.sub(r"\\(.)", r"\1", value[1:-1]), line
        elif kind in ("punct", "word"):
            yield kind, value, line
        line += value.count("\n")
        pos = m.end()


class _Parser:
    def __init__(self, text: str):
        self.tokens = list(_tokenize(text))
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None, None)

    def next(self):
        tok = self.peek()
        if tok[0] is None:
            last = self.tokens[-1][2] if self.tokens else 1
            raise StoreParseError(f"line {last}: unexpected end of file")
        self.pos += 1
        return tok

    def expect(self, punct: str):
        kind, value, line = self.next()
        if kind != "punct" or value != punct:
            raise StoreParseError(f"line {line}: expected {punct!r}, got {value!r}")

    def name(self) -> str:
        kind, value, line = self.next()
        if kind not in ("word", "string") or not value:
            raise StoreParseError(f"line {line}: expected a name, got {value!r}")
        return value

    def value(self):
        kind, value, line = self.peek()
        if kind == "punct" and value == "[":
            self.next()
            items = []
            while True:
                kind, value, line = self.peek()
                if kind == "punct" and value == "]":
                    self.next()
                    return items
                if kind == "punct" and value == ",":
                    self.next()
                    continue
                items.append(self.name())
        return self.name()

    def sections(self):
        while self.peek()[0] is not None:
            kind, section, line = self.next()
            if kind != "word" or section not in ("user", "rac", "group"):
                raise StoreParseError(f"line {line}: expected user/rac/group, got {section!r}")
            name = self.name()
            self.expect("{")
            entries = []
            while True:
                kind, key, kline = self.next()
                if kind == "punct" and key == "}":
                    break
                if kind != "word":
                    raise StoreParseError(f"line {kline}: expected a key, got {key!r}")
                self.expect("=")
                entries.append((key, self.value(), kline))
            yield section, name, entries, line


def _scalar(key, value, line):
    if isinstance(value, list):
        raise StoreParseError(f"line {line}: {key} takes a single value")
    return value


def parse_store(text: str) -> AaStore:
    users, racs, groups = {}, {}, {}
    for section, name, entries, line in _Parser(text).sections():
        if name in {"user": users, "rac": racs, "group": groups}[section]:
            raise StoreParseError(f"line {line}: duplicate {section} {name!r}")
        if ";" in name:
            raise StoreParseError(f"line {line}: {section} name may not contain ';'")
        if section == "user":
            password = None
            for key, value, kline in entries:
                if key != "password":
                    raise StoreParseError(f"line {kline}: unknown user key {key!r}")
                password = _scalar(key, value, kline).encode()
            if password is None:
                raise StoreParseError(f"line {line}: user {name!r} has no password")
            users[name] = UserProfile(name, password)
        elif section == "rac":
            digest, peers = None, []
            for key, value, kline in entries:
                value = _scalar(key, value, kline)
                if key == "digest":
                    if not value.startswith("sha256:") or len(value) != 71:
                        raise StoreParseError(f"line {kline}: digest must be sha256:<64 hex>")
                    try:
                        digest = bytes.fromhex(value[7:])
                    except ValueError:
                        raise StoreParseError(f"line {kline}: bad digest hex") from None
                elif key == "allow":
                    try:
                        peers.append(parse_peer(value))
                    except ValueError as exc:
                        raise StoreParseError(f"line {kline}: {exc}") from None
                else:
                    raise StoreParseError(f"line {kline}: unknown rac key {key!r}")
            if digest is None:
                raise StoreParseError(f"line {line}: rac {name!r} has no digest")
            racs[name] = RacProfile(name, digest, tuple(peers))
        else:
            members, images = [], []
            for key, value, kline in entries:
                items = value if isinstance(value, list) else [value]
                if key == "users":
                    members += items
                elif key == "images":
                    images += items
                else:
                    raise StoreParseError(f"line {kline}: unknown group key {key!r}")
            groups[name] = GroupBinding(name, frozenset(members), frozenset(images))
    return AaStore(users, racs, tuple(groups.values()))


def load_store(path) -> AaStore:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except UnicodeDecodeError as exc:
        raise StoreParseError(f"{path}: not UTF-8") from exc
    return parse_store(text)


def _quote(text: str) -> str:
    return '"' + text.replace("\\", "\\\\").replace('"', '\\"') + '"'


def _name(text: str) -> str:
    return text if re.fullmatch(r'[^\s{}\[\]=,"#]+', text) else _quote(text)


def dump_store(store: AaStore) -> str:
    lines = []
    for u in store.users.values():
        lines.append(f"user {_name(u.user_name)} {{ password = {_quote(u.password.decode())} }}")
    for r in store.racs.values():
        allow = "".join(f"\n    allow = {_quote(format_peer(p))}" for p in r.allowed_peers)
        lines.append(f"rac {_name(r.image_name)} {{\n"
                     f"    digest = \"sha256:{r.image_digest.hex()}\"{allow}\n}}")
    for g in store.groups:
        users = ", ".join(_name(m) for m in sorted(g.members))
        images = ", ".join(_name(i) for i in sorted(g.permitted_images))
        lines.append(f"group {_name(g.group_name)} {{ users = [{users}] images = [{images}] }}")
    return "\n".join(lines) + "\n"
