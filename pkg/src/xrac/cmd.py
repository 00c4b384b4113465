"""Simulated container manager daemon with the two-step authorization hook.

Launching is simulated: a running container is a record plus an endpoint
attached to the enforcer relay under the container's IPv6 address.
"""

from __future__ import annotations

import enum
import hashlib
import ipaddress
import itertools
import logging
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from xrac.eap import ContainerIdentity
from xrac.enforcer import EnforcerDataClient
from xrac.net import JsonLineClient, JsonLineServer
from xrac.radius import CazdAttributes
from xrac.supplicant import FINAL_GRACE, RETRANSMIT_BUDGET, TIMEOUT, Supplicant, run_cs_session

__all__ = [
    "compute_digest", "ContainerImage", "ImageStore", "NoSuchImage", "AddressAllocator",
    "ContainerState", "ContainerRecord", "AuthzDecision", "ContainerManager", "CmdError",
    "CmdService", "CmdClient", "DEFAULT_SUBNET", "DEFAULT_HOST_ADDRESS",
]

log = logging.getLogger("xrac.cmd")

DEFAULT_SUBNET = "2001:db8::11:0/116"
DEFAULT_HOST_ADDRESS = "2001:db8::11:fff"


def compute_digest(blob: bytes) -> bytes:
    return hashlib.sha256(blob).digest()


class NoSuchImage(LookupError):
    pass


class CmdError(RuntimeError):
    pass


@dataclass(frozen=True)
class ContainerImage:
    image_name: str
    blob: bytes = field(repr=False)
    digest: bytes = b""

    def __post_init__(self):
        if not self.digest:
            object.__setattr__(self, "digest", compute_digest(self.blob))
        elif compute_digest(self.blob) != self.digest:
            raise ValueError(f"digest does not match blob of {self.image_name}")


class ImageStore:
    """One file per image; the file name is the image name."""

    def __init__(self, directory):
        self.directory = Path(directory)

    def names(self) -> list[str]:
        return sorted(p.name for p in self.directory.iterdir() if p.is_file())

    def path(self, image_name: str) -> Path:
        if not image_name or "/" in image_name or image_name.startswith("."):
            raise NoSuchImage(image_name)
        return self.directory / image_name

    def load(self, image_name: str) -> ContainerImage:
        try:
            blob = self.path(image_name).read_bytes()
        except (FileNotFoundError, IsADirectoryError):
            raise NoSuchImage(image_name) from None
        return ContainerImage(image_name, blob)


class AddressAllocator:
    """Lowest free host address of the subnet, skipping reserved ones."""

    def __init__(self, subnet: str = DEFAULT_SUBNET, reserved=()):
        self.subnet = ipaddress.IPv6Network(subnet)
        self.reserved = {ipaddress.IPv6Address(a) for a in reserved}
        self._live: set[ipaddress.IPv6Address] = set()
        self._lock = threading.Lock()

    def allocate(self) -> ipaddress.IPv6Address:
        base = int(self.subnet.network_address)
        with self._lock:
            for offset in range(1, self.subnet.num_addresses):
                addr = ipaddress.IPv6Address(base + offset)
                if addr not in self._live and addr not in self.reserved:
                    self._live.add(addr)
                    return addr
        raise CmdError(f"address pool {self.subnet} exhausted")

    def release(self, addr):
        with self._lock:
            self._live.discard(ipaddress.IPv6Address(addr))

    def live(self) -> set[ipaddress.IPv6Address]:
        with self._lock:
            return set(self._live)


class ContainerState(enum.Enum):
    CREATED = "Created"
    AWAITING_AUTHZ = "AwaitingAuthz"
    RUNNING = "Running"
    DENIED = "Denied"
    STOPPED = "Stopped"


@dataclass
class ContainerRecord:
    container_id: str
    image_name: str
    user_name: str
    rac_address: ipaddress.IPv6Address | None = None
    state: ContainerState = ContainerState.CREATED
    cazd: CazdAttributes | None = None
    deny_reason: str | None = None
    timings: dict = field(default_factory=dict)
    history: list[str] = field(default_factory=list)

    def set_state(self, state: ContainerState):
        if state is ContainerState.RUNNING and self.cazd is None:
            raise CmdError("a container cannot run without CAZD")
        self.state = state
        self.history.append(state.value)

    def to_json(self) -> dict:
        return {
            "id": self.container_id,
            "image": self.image_name,
            "user": self.user_name,
            "addr": self.rac_address.compressed if self.rac_address else None,
            "state": self.state.value,
            "reason": self.deny_reason,
            "cazd": self.cazd.to_json() if self.cazd else None,
            "timings": self.timings,
            "history": self.history,
        }


@dataclass(frozen=True)
class AuthzDecision:
    allow: bool
    reason: str | None = None


PERMIT = AuthzDecision(True)


class ContainerManager:
    def __init__(self, images: ImageStore, ca_addr, *, subnet: str = DEFAULT_SUBNET,
                 host_address: str = DEFAULT_HOST_ADDRESS, relay: EnforcerDataClient | None = None,
                 cs_timeout: float = TIMEOUT, cs_budget: int = RETRANSMIT_BUDGET,
                 cs_grace: float = FINAL_GRACE):
        self.images = images
        self.ca_addr = tuple(ca_addr)
        self.host_address = ipaddress.IPv6Address(host_address)
        self.allocator = AddressAllocator(subnet, reserved=[self.host_address])
        if self.host_address not in self.allocator.subnet:
            log.warning("host address %s is outside %s", self.host_address, subnet)
        self.relay = relay
        self.cs_kw = {"timeout": cs_timeout, "retransmit_budget": cs_budget,
                      "final_grace": cs_grace}
        self.records: dict[str, ContainerRecord] = {}
        self._supplicants: dict[str, Supplicant] = {}
        self._endpoints: dict[str, object] = {}
        self._host_endpoint = None
        self._serial = itertools.count(1)
        self._lock = threading.Lock()
        self._id_locks: dict[str, threading.Lock] = {}

    def attach_host(self):
        if self.relay is not None and self._host_endpoint is None:
            self._host_endpoint = self.relay.attach(self.host_address,
                                                    lambda src, req: "managed host")

    # -- authorization hook ----------------------------------------------------

    def authorize_step1(self, image_name: str) -> AuthzDecision:
        # the first request only names the image; the decision is made in step 2
        log.info("authz step1 image=%s decision=permit", image_name)
        return PERMIT

    def authorize_step2(self, user_name: str, password: str | bytes, image_name: str,
                        record: ContainerRecord | None = None) -> AuthzDecision:
        if record is None:
            record = ContainerRecord(f"adhoc-{next(self._serial)}", image_name, user_name)
        pw = password.encode() if isinstance(password, str) else password
        t0 = time.perf_counter()
        try:
            # keep only the digest so freeing the blob is charged to this phase
            digest = self.images.load(image_name).digest
        except NoSuchImage:
            record.deny_reason = "no-such-image"
            return AuthzDecision(False, "no-such-image")
        t1 = time.perf_counter()
        record.timings["digest_ms"] = (t1 - t0) * 1e3

        record.rac_address = self.allocator.allocate()
        record.set_state(ContainerState.AWAITING_AUTHZ)
        ci = ContainerIdentity(user_name, image_name, digest, record.rac_address)
        result = run_cs_session(ci, pw, self.ca_addr, **self.cs_kw)
        t2 = time.perf_counter()
        record.timings["aa_ms"] = (t2 - t1) * 1e3
        if not result.authorized:
            self.allocator.release(record.rac_address)
            record.deny_reason = result.deny_reason
            log.info("authz step2 user=%s image=%s decision=deny reason=%s detail=%s",
                     user_name, image_name, result.deny_reason, result.reason)
            return AuthzDecision(False, result.deny_reason)
        record.cazd = result.cazd
        self._supplicants[record.container_id] = result.supplicant
        log.info("authz step2 user=%s image=%s decision=permit addr=%s",
                 user_name, image_name, record.rac_address)
        return PERMIT

    # -- lifecycle ---------------------------------------------------------------

    def _id_lock(self, container_id: str) -> threading.Lock:
        with self._lock:
            return self._id_locks.setdefault(container_id, threading.Lock())

    def start(self, image_name: str, user_name: str, password: str | bytes,
              name: str | None = None) -> ContainerRecord:
        t0 = time.perf_counter()
        with self._lock:
            container_id = name or f"rac-{next(self._serial):04d}"
        with self._id_lock(container_id):
            with self._lock:
                existing = self.records.get(container_id)
                if existing is not None and existing.state in (
                        ContainerState.RUNNING, ContainerState.AWAITING_AUTHZ):
                    raise CmdError(f"container {container_id} is already running")
                record = ContainerRecord(container_id, image_name, user_name)
                record.history.append(record.state.value)
                self.records[container_id] = record

            self.authorize_step1(image_name)
            decision = self.authorize_step2(user_name, password, image_name, record)
            if not decision.allow:
                record.set_state(ContainerState.DENIED)
                record.timings["total_ms"] = (time.perf_counter() - t0) * 1e3
                return record

            t_launch = time.perf_counter()
            try:
                if self.relay is not None:
                    image = image_name
                    self._endpoints[container_id] = self.relay.attach(
                        record.rac_address, lambda src, req: f"{image} container")
            except Exception:
                self._release(record)
                record.deny_reason = "launch-failed"
                record.set_state(ContainerState.DENIED)
                raise
            record.set_state(ContainerState.RUNNING)
            t_end = time.perf_counter()
            record.timings["launch_ms"] = (t_end - t_launch) * 1e3
            record.timings["total_ms"] = (t_end - t0) * 1e3
            return record

    def _release(self, record: ContainerRecord):
        supplicant = self._supplicants.pop(record.container_id, None)
        if supplicant is not None:
            if not supplicant.logoff():
                log.warning("container %s: logoff not confirmed", record.container_id)
            supplicant.close()
        endpoint = self._endpoints.pop(record.container_id, None)
        if endpoint is not None:
            endpoint.close()
        if record.rac_address is not None:
            self.allocator.release(record.rac_address)

    def stop(self, container_id: str) -> ContainerRecord:
        with self._id_lock(container_id):
            record = self.records.get(container_id)
            if record is None:
                raise CmdError(f"no such container {container_id}")
            if record.state is not ContainerState.RUNNING:
                raise CmdError(f"container {container_id} is {record.state.value}")
            self._release(record)
            record.set_state(ContainerState.STOPPED)
            return record

    def list(self) -> list[ContainerRecord]:
        with self._lock:
            return list(self.records.values())

    def shutdown(self):
        for record in self.list():
            if record.state is ContainerState.RUNNING:
                try:
                    self.stop(record.container_id)
                except CmdError:
                    pass
        if self._host_endpoint is not None:
            self._host_endpoint.close()
            self._host_endpoint = None


class CmdService:
    """Line-delimited JSON control socket in front of a ContainerManager."""

    def __init__(self, control_bind, manager: ContainerManager):
        self.manager = manager
        self.server = JsonLineServer(control_bind, self._handle, role="cmd")

    @property
    def address(self):
        return self.server.address

    def start(self):
        self.manager.attach_host()
        self.server.start()
        return self

    def stop(self):
        self.server.stop()
        self.manager.shutdown()

    def _handle(self, req: dict, conn):
        op = req.get("op")
        try:
            if op == "start":
                record = self.manager.start(req["image"], req["user"], req["password"],
                                            req.get("name"))
            elif op == "stop":
                record = self.manager.stop(req["id"])
            elif op == "list":
                return {"ok": True, "containers": [r.to_json() for r in self.manager.list()]}
            else:
                raise CmdError(f"unknown op {op!r}")
        except CmdError as exc:
            return {"ok": False, "error": str(exc)}
        return {"ok": True, "container": record.to_json()}


class CmdClient:
    def __init__(self, addr, timeout: float = 60.0):
        self.addr = tuple(addr)
        self.timeout = timeout

    def _call(self, **req) -> dict:
        with JsonLineClient(self.addr, timeout=self.timeout) as c:
            reply = c.call(**req)
        if not reply.get("ok"):
            raise CmdError(reply.get("error", "cmd error"))
        return reply

    def start(self, image: str, user: str, password: str, name: str | None = None) -> dict:
        req = {"op": "start", "image": image, "user": user, "password": password}
        if name:
            req["name"] = name
        return self._call(**req)["container"]

    def stop(self, container_id: str) -> dict:
        return self._call(op="stop", id=container_id)["container"]

    def list(self) -> list[dict]:
        return self._call(op="list")["containers"]
