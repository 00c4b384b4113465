import ipaddress
import random

import pytest

from xrac.cmd import compute_digest
from xrac.config import EPHEMERAL_PORTS, load_config, write_default_testbed
from xrac.eap import ContainerIdentity
from xrac.store import AaStore, GroupBinding, RacProfile, UserProfile

WGET_BLOB = random.Random(11).randbytes(4096)
PATCHED_BLOB = WGET_BLOB[:100] + bytes([WGET_BLOB[100] ^ 1]) + WGET_BLOB[101:]
CURL_BLOB = random.Random(12).randbytes(2048)
RAC1 = ipaddress.IPv6Address("2001:db8::11:1")
PROTECTED = "2001:db8::aa:0"
PUBLIC = "2001:db8::bb:0"


def make_store(**over) -> AaStore:
    users = over.get("users", [UserProfile("alice", b"wonderland"), UserProfile("bob", b"builder")])
    racs = over.get("racs", [RacProfile("wget", compute_digest(WGET_BLOB), (PROTECTED,)),
                             RacProfile("curl", compute_digest(CURL_BLOB), (PUBLIC,)),
                             RacProfile("offline", compute_digest(b"offline"), ())])
    groups = over.get("groups", [
        GroupBinding("staff", frozenset({"alice"}), frozenset({"wget", "offline"})),
        GroupBinding("interns", frozenset({"bob"}), frozenset({"curl"})),
    ])
    return AaStore.build(users, racs, groups)


def identity(user="alice", image="wget", blob=WGET_BLOB, addr=RAC1) -> ContainerIdentity:
    return ContainerIdentity(user, image, compute_digest(blob), ipaddress.IPv6Address(addr))


@pytest.fixture
def store():
    return make_store()


@pytest.fixture(scope="session")
def testbed_config_path(tmp_path_factory):
    root = tmp_path_factory.mktemp("testbed")
    return write_default_testbed(root, ports=EPHEMERAL_PORTS)


@pytest.fixture
def testbed_config(testbed_config_path):
    # short timers keep the fault-injection cases quick
    return load_config(testbed_config_path).with_(retransmit_interval=0.3)


# one line per acceptance criterion, printed after the run
ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
