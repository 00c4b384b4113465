"""Testbed configuration (TOML) and generation of the default testbed."""

from __future__ import annotations

import random
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from xrac.cmd import DEFAULT_HOST_ADDRESS, DEFAULT_SUBNET, compute_digest
from xrac.store import AaStore, GroupBinding, RacProfile, UserProfile, dump_store

__all__ = ["TestbedConfig", "load_config", "write_default_testbed", "PROTECTED", "PUBLIC"]

PROTECTED = "2001:db8::aa:0"
PUBLIC = "2001:db8::bb:0"
CA_PORT = 5995

DEFAULT_PORTS = {"as": 1812, "ca": CA_PORT, "enforcer_control": 6633,
                 "enforcer_data": 6634, "cmd": 7070}
EPHEMERAL_PORTS = dict.fromkeys(DEFAULT_PORTS, 0)


@dataclass(frozen=True)
class TestbedConfig:
    __test__ = False  # keep pytest from collecting this

    root: Path
    store: Path
    images: Path
    secret: str = "xrac-testbed-secret"
    ca_secret: str | None = None  # overrides the CA side only, for fault injection
    seed: int = 7
    loopback: str = "127.0.0.1"
    subnet: str = DEFAULT_SUBNET
    host_address: str = DEFAULT_HOST_ADDRESS
    ports: dict = field(default_factory=lambda: dict(DEFAULT_PORTS))
    servers: dict = field(default_factory=lambda: {PROTECTED: "protected content",
                                                   PUBLIC: "public content"})
    static_pairs: tuple = ((DEFAULT_SUBNET, PUBLIC),)
    user: str = "alice"
    password: str = "wonderland"
    image: str = "wget"
    protected: str = PROTECTED
    public: str = PUBLIC
    retransmit_interval: float = 2.0
    retransmit_budget: int = 3
    as_offline: bool = False

    def with_(self, **changes) -> TestbedConfig:
        return replace(self, **changes)


def load_config(path) -> TestbedConfig:
    path = Path(path)
    with open(path, "rb") as fh:
        data = tomllib.load(fh)
    root = path.parent.resolve()
    scenario = data.get("scenario", {})
    timers = data.get("timers", {})
    faults = data.get("faults", {})
    ports = dict(DEFAULT_PORTS)
    ports.update({k: int(v) for k, v in data.get("ports", {}).items()})
    unknown = set(ports) - set(DEFAULT_PORTS)
    if unknown:
        raise ValueError(f"{path}: unknown ports {sorted(unknown)}")
    kw = {}
    if "servers" in data:
        kw["servers"] = dict(data["servers"])
    if "static_pairs" in data:
        pairs = data["static_pairs"]
        if any(len(p) != 2 for p in pairs):
            raise ValueError(f"{path}: static_pairs entries must be [a, b]")
        kw["static_pairs"] = tuple(tuple(p) for p in pairs)
    for key in ("secret", "ca_secret", "seed", "loopback", "subnet", "host_address"):
        if key in data:
            kw[key] = data[key]
    for key in ("user", "password", "image", "protected", "public"):
        if key in scenario:
            kw[key] = scenario[key]
    for key in ("retransmit_interval", "retransmit_budget"):
        if key in timers:
            kw[key] = timers[key]
    if "as_offline" in faults:
        kw["as_offline"] = bool(faults["as_offline"])
    return TestbedConfig(root=root, store=root / data.get("store", "aa_store.conf"),
                         images=root / data.get("images", "images"), ports=ports, **kw)


def _toml_str(s: str) -> str:
    return '"' + s.replace("\\", "\\\\").replace('"', '\\"') + '"'


def write_default_testbed(directory, *, seed: int = 7, ports: dict | None = None,
                          image_size: int = 6 * 2**20) -> Path:
    """Write config.toml, aa_store.conf and images/ for the validation testbed."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    rng = random.Random(seed)
    wget = rng.randbytes(image_size)
    patched = bytearray(wget)
    if patched:
        patched[rng.randrange(len(patched))] ^= 0x01
    curl = rng.randbytes(256 * 1024)
    (root / "images" / "wget").write_bytes(wget)
    (root / "images" / "wget-patched").write_bytes(bytes(patched))
    (root / "images" / "curl").write_bytes(curl)

    store = AaStore.build(
        users=[UserProfile("alice", b"wonderland"), UserProfile("bob", b"builder")],
        racs=[RacProfile("wget", compute_digest(wget), (PROTECTED,)),
              RacProfile("curl", compute_digest(curl), (PUBLIC,))],
        groups=[GroupBinding("staff", frozenset({"alice"}), frozenset({"wget"})),
                GroupBinding("interns", frozenset({"bob"}), frozenset({"curl"}))],
    )
    (root / "aa_store.conf").write_text(
        "# testbed AA database; passwords are cleartext for MD5-Challenge\n" + dump_store(store))

    ports = dict(DEFAULT_PORTS if ports is None else ports)
    port_lines = "\n".join(f"{k} = {v}" for k, v in ports.items())
    (root / "config.toml").write_text(f"""\
seed = {seed}
secret = "xrac-testbed-secret"
loopback = "127.0.0.1"
subnet = "{DEFAULT_SUBNET}"
host_address = "{DEFAULT_HOST_ADDRESS}"
store = "aa_store.conf"
images = "images"
static_pairs = [[{_toml_str(DEFAULT_SUBNET)}, {_toml_str(PUBLIC)}]]

[ports]
{port_lines}

[servers]
"{PROTECTED}" = "protected content"
"{PUBLIC}" = "public content"

[scenario]
user = "alice"
password = "wonderland"
image = "wget"
protected = "{PROTECTED}"
public = "{PUBLIC}"

[timers]
retransmit_interval = 2.0
retransmit_budget = 3
""")
    return root / "config.toml"
