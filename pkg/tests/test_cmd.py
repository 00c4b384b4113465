"""Container manager: digests, addresses, the authorization hook and lifecycle."""

import ipaddress

import pytest

from conftest import CURL_BLOB, PATCHED_BLOB, PROTECTED, WGET_BLOB, make_store
from sim import SECRET
from xrac.authenticator import CaService
from xrac.cmd import (
    AddressAllocator, CmdClient, CmdError, CmdService, ContainerImage, ContainerManager,
    ContainerRecord, ContainerState, ImageStore, NoSuchImage, compute_digest,
)
from xrac.enforcer import EnforcerControlClient, EnforcerDataClient, EnforcerService, web_page
from xrac.harness import free_udp_port
from xrac.server import AsService


def test_sha256_vectors():
    assert compute_digest(b"").hex() == \
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    assert compute_digest(b"abc").hex() == \
        "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"


def test_image_digest_checked():
    assert ContainerImage("x", b"abc").digest == compute_digest(b"abc")
    with pytest.raises(ValueError):
        ContainerImage("x", b"abc", compute_digest(b"abd"))


@pytest.fixture
def images(tmp_path):
    d = tmp_path / "images"
    d.mkdir()
    (d / "wget").write_bytes(WGET_BLOB)
    (d / "wget-patched").write_bytes(PATCHED_BLOB)
    (d / "curl").write_bytes(CURL_BLOB)
    return ImageStore(d)


def test_image_store(images):
    assert images.names() == ["curl", "wget", "wget-patched"]
    assert images.load("curl").blob == CURL_BLOB
    for bad in ("chrome", "../wget", ".hidden", ""):
        with pytest.raises(NoSuchImage):
            images.load(bad)


def test_allocator_order_and_reuse():
    alloc = AddressAllocator("2001:db8::11:0/116", reserved=["2001:db8::11:2"])
    first = alloc.allocate()
    assert first == ipaddress.IPv6Address("2001:db8::11:1")
    assert alloc.allocate() == ipaddress.IPv6Address("2001:db8::11:3")
    alloc.release(first)
    assert alloc.allocate() == first


def test_allocator_exhaustion():
    alloc = AddressAllocator("2001:db8::11:0/126")
    got = [alloc.allocate() for _ in range(3)]
    assert len(set(got)) == 3
    with pytest.raises(CmdError):
        alloc.allocate()


def test_running_requires_cazd():
    record = ContainerRecord("c", "wget", "alice")
    with pytest.raises(CmdError):
        record.set_state(ContainerState.RUNNING)


class Stack:
    def __init__(self, images, *, store=None, as_online=True, cs_timeout=0.5):
        self.enforcer = EnforcerService(("127.0.0.1", 0), ("127.0.0.1", 0)).start()
        self.data = EnforcerDataClient(self.enforcer.data_address)
        self.handles = [self.data.attach(PROTECTED, web_page("protected"))]
        self.control = EnforcerControlClient(self.enforcer.control_address)
        self.as_service = None
        if as_online:
            self.as_service = AsService(("127.0.0.1", 0), SECRET, store=store or make_store()).start()
            as_addr = self.as_service.address
        else:
            as_addr = ("127.0.0.1", free_udp_port("127.0.0.1"))
        self.ca = CaService(("127.0.0.1", 0), as_addr, SECRET, self.control,
                            retransmit_interval=cs_timeout).start()
        self.manager = ContainerManager(images, self.ca.address, relay=self.data,
                                        cs_timeout=cs_timeout, cs_grace=0.1)
        self.manager.attach_host()

    def pairs(self):
        return self.enforcer.whitelist.dynamic_pairs()

    def stop(self):
        self.manager.shutdown()
        self.ca.stop()
        if self.as_service:
            self.as_service.stop()
        for h in self.handles:
            h.close()
        self.control.close()
        self.enforcer.stop()


@pytest.fixture
def stack(images):
    s = Stack(images)
    yield s
    s.stop()


def test_step1_always_permits(stack):
    for name in ("wget", "chrome", ""):
        assert stack.manager.authorize_step1(name).allow


def test_lifecycle(stack):
    m = stack.manager
    record = m.start("wget", "alice", "wonderland")
    assert record.state is ContainerState.RUNNING
    assert record.history == ["Created", "AwaitingAuthz", "Running"]
    assert str(record.rac_address) == "2001:db8::11:1"
    assert stack.pairs() == {("2001:db8::11:1", PROTECTED)}
    assert set(record.timings) == {"digest_ms", "aa_ms", "launch_ms", "total_ms"}
    assert stack.data.fetch(record.rac_address, PROTECTED).allowed

    with pytest.raises(CmdError, match="already running"):
        m.start("wget", "alice", "wonderland", name=record.container_id)

    m.stop(record.container_id)
    assert record.state is ContainerState.STOPPED
    assert stack.pairs() == set()
    assert stack.data.fetch(record.rac_address, PROTECTED).status == "blocked"
    assert m.allocator.live() == set()
    with pytest.raises(CmdError):
        m.stop(record.container_id)
    with pytest.raises(CmdError):
        m.stop("rac-9999")


def test_stopped_name_can_be_reused(stack):
    m = stack.manager
    m.start("curl", "bob", "builder", name="web")
    m.stop("web")
    assert m.start("curl", "bob", "builder", name="web").state is ContainerState.RUNNING


@pytest.mark.parametrize("image,user,password,reason", [
    ("wget", "bob", "builder", "aa-failed"),
    ("wget", "alice", "wrong", "aa-failed"),
    ("wget-patched", "alice", "wonderland", "aa-failed"),
    ("chrome", "alice", "wonderland", "no-such-image"),
])
def test_denials(stack, image, user, password, reason):
    record = stack.manager.start(image, user, password)
    assert record.state is ContainerState.DENIED and record.deny_reason == reason
    assert record.cazd is None
    assert stack.pairs() == set()
    assert stack.manager.allocator.live() == set()
    with pytest.raises(CmdError):
        stack.manager.stop(record.container_id)


def test_server_down_is_denied(images):
    # the authenticator gives up on the server and answers with a Failure
    s = Stack(images, as_online=False, cs_timeout=0.2)
    try:
        record = s.manager.start("wget", "alice", "wonderland")
        assert record.state is ContainerState.DENIED and record.deny_reason == "aa-failed"
        assert s.pairs() == set()
    finally:
        s.stop()


def test_authenticator_unreachable_is_a_timeout(images):
    m = ContainerManager(images, ("127.0.0.1", free_udp_port("127.0.0.1")),
                         cs_timeout=0.1, cs_grace=0.0)
    record = m.start("wget", "alice", "wonderland")
    assert record.deny_reason == "timeout"


def test_service_protocol(stack):
    svc = CmdService(("127.0.0.1", 0), stack.manager).start()
    try:
        client = CmdClient(svc.address)
        started = client.start("curl", "bob", "builder", name="c1")
        assert started["state"] == "Running" and started["addr"] == "2001:db8::11:1"
        assert started["cazd"]["peers"] == ["2001:db8::bb:0"]
        assert [c["id"] for c in client.list()] == ["c1"]
        assert client.stop("c1")["state"] == "Stopped"
        with pytest.raises(CmdError, match="no such container"):
            client.stop("c2")
        with pytest.raises(CmdError, match="unknown op"):
            client._call(op="reboot")
    finally:
        svc.server.stop()
