"""Boot and tear down the five-service testbed, in one process or as many."""

from __future__ import annotations

import json
import logging
import os
import queue
import shutil
import signal
import socket
import subprocess
import sys
import tempfile
import threading
import time
from pathlib import Path

from xrac.authenticator import CaService
from xrac.cmd import CmdClient, CmdService, ContainerManager, ImageStore
from xrac.config import TestbedConfig
from xrac.enforcer import (
    EnforcerControlClient, EnforcerDataClient, EnforcerService, web_page,
)
from xrac.net import StartupError, format_hostport, parse_hostport
from xrac.server import AsService

__all__ = ["Testbed", "free_udp_port", "READY_TIMEOUT"]

log = logging.getLogger("xrac.harness")

READY_TIMEOUT = 15.0


def free_udp_port(host: str) -> int:
    """A port nothing listens on (for the AS-offline fault)."""
    with socket.socket(socket.AF_INET6 if ":" in host else socket.AF_INET,
                       socket.SOCK_DGRAM) as s:
        s.bind((host, 0))
        return s.getsockname()[1]


class _Child:
    """A service subprocess announcing itself with ``READY <role> <json>``."""

    def __init__(self, role: str, argv: list[str], stderr_path: Path):
        self.role = role
        self.stderr_path = stderr_path
        self._stderr = open(self.stderr_path, "wb")
        env = dict(os.environ, PYTHONUNBUFFERED="1")
        self.proc = subprocess.Popen(
            [sys.executable, "-m", "xrac", *argv], stdout=subprocess.PIPE,
            stderr=self._stderr, stdin=subprocess.DEVNULL, env=env, text=True)
        self.lines: queue.Queue = queue.Queue()
        self._reader = threading.Thread(target=self._read, daemon=True, name=f"{role}-out")
        self._reader.start()

    def _read(self):
        for line in self.proc.stdout:
            self.lines.put(line.rstrip("\n"))
        self.lines.put(None)

    def expect(self, prefix: str, timeout: float = READY_TIMEOUT) -> str:
        deadline = time.monotonic() + timeout
        while True:
            try:
                line = self.lines.get(timeout=max(0.0, deadline - time.monotonic()))
            except queue.Empty:
                raise StartupError(f"{self.role}: no {prefix.strip()} within {timeout:.0f} s") from None
            if line is None:
                self.proc.wait(timeout=5)
                raise StartupError(self.error_text() or f"{self.role} exited")
            if line.startswith(prefix):
                return line[len(prefix):]

    def ready(self) -> dict:
        return json.loads(self.expect(f"READY {self.role} "))

    def error_text(self) -> str:
        self._stderr.flush()
        lines = [ln for ln in self.stderr_path.read_text(errors="replace").splitlines() if ln.strip()]
        return lines[-1].removeprefix("xrac: error: ") if lines else ""

    def stop(self, timeout: float = 10.0):
        if self.proc.poll() is None:
            self.proc.terminate()
            try:
                self.proc.wait(timeout=timeout)
            except subprocess.TimeoutExpired:
                self.proc.kill()
                self.proc.wait()
        self._reader.join(timeout=2)
        self.proc.stdout.close()
        self._stderr.close()


class Testbed:
    """Enforcer, stub servers, AS, CA and CMD on loopback.

    Scenarios talk to the testbed only through its sockets (CMD control,
    enforcer data and control), so both modes are driven identically.
    Store and images are copied into a private run directory which scenarios
    may modify freely.
    """

    __test__ = False

    def __init__(self, config: TestbedConfig, *, distributed: bool = False):
        self.config = config
        self.distributed = distributed
        self.addresses: dict[str, tuple[str, int]] = {}
        self.run_dir: Path | None = None
        self._services: list = []  # in-process objects with .stop()
        self._children: dict[str, _Child] = {}
        self._as_service: AsService | None = None
        self.cmd: CmdClient | None = None
        self.data: EnforcerDataClient | None = None
        self.control: EnforcerControlClient | None = None

    # -- paths ----------------------------------------------------------------

    @property
    def store_path(self) -> Path:
        return self.run_dir / "aa_store.conf"

    @property
    def images_dir(self) -> Path:
        return self.run_dir / "images"

    def _bind(self, key: str) -> tuple[str, int]:
        return (self.config.loopback, int(self.config.ports[key]))

    # -- lifecycle ---------------------------------------------------------------

    def boot(self) -> Testbed:
        cfg = self.config
        self.run_dir = Path(tempfile.mkdtemp(prefix="xrac-run-"))
        try:
            shutil.copyfile(cfg.store, self.store_path)
            shutil.copytree(cfg.images, self.images_dir)
            if self.distributed:
                self._boot_processes()
            else:
                self._boot_inprocess()
        except BaseException:
            self.teardown()
            raise
        self.cmd = CmdClient(self.addresses["cmd"])
        self.data = EnforcerDataClient(self.addresses["enforcer_data"])
        self.control = EnforcerControlClient(self.addresses["enforcer_control"])
        log.info("testbed up: %s", {k: format_hostport(v) for k, v in self.addresses.items()})
        return self

    def _as_address(self) -> tuple[str, int]:
        if self.config.as_offline:
            port = self.config.ports["as"] or free_udp_port(self.config.loopback)
            return (self.config.loopback, port)
        return self.addresses["as"]

    def _boot_inprocess(self):
        cfg = self.config
        enforcer = EnforcerService(self._bind("enforcer_data"), self._bind("enforcer_control"),
                                   cfg.static_pairs).start()
        self._services.append(enforcer)
        self.addresses["enforcer_data"] = enforcer.data_address
        self.addresses["enforcer_control"] = enforcer.control_address

        data = EnforcerDataClient(enforcer.data_address)
        for addr, content in cfg.servers.items():
            self._services.append(data.attach(addr, web_page(content)))

        if not cfg.as_offline:
            as_service = AsService(self._bind("as"), cfg.secret.encode(), self.store_path)
            self._services.append(as_service.start())
            self._as_service = as_service
            self.addresses["as"] = as_service.address

        enforcer_client = EnforcerControlClient(enforcer.control_address)
        self._services.append(enforcer_client)
        ca = CaService(self._bind("ca"), self._as_address(),
                       (cfg.ca_secret or cfg.secret).encode(), enforcer_client,
                       retransmit_interval=cfg.retransmit_interval,
                       retransmit_budget=cfg.retransmit_budget)
        self._services.append(ca.start())
        self.addresses["ca"] = ca.address

        manager = ContainerManager(
            ImageStore(self.images_dir), ca.address, subnet=cfg.subnet,
            host_address=cfg.host_address, relay=data,
            cs_timeout=cfg.retransmit_interval, cs_budget=cfg.retransmit_budget)
        cmd = CmdService(self._bind("cmd"), manager)
        self._services.append(cmd.start())
        self.addresses["cmd"] = cmd.address

    def _spawn(self, role: str, argv: list[str]) -> dict:
        key = role if role != "server" else f"server-{len(self._children)}"
        child = _Child(role, [role, *argv], self.run_dir / f"{key}.stderr")
        self._children[key] = child
        return child.ready()

    def _boot_processes(self):
        cfg = self.config
        hp = format_hostport
        static = [a for pair in cfg.static_pairs for a in ("--static", ",".join(pair))]
        ready = self._spawn("enforcer", ["--data", hp(self._bind("enforcer_data")),
                                         "--control", hp(self._bind("enforcer_control")), *static])
        self.addresses["enforcer_data"] = parse_hostport(ready["data"])
        self.addresses["enforcer_control"] = parse_hostport(ready["control"])
        data = hp(self.addresses["enforcer_data"])

        for addr, content in cfg.servers.items():
            self._spawn("server", ["--enforcer-data", data, "--addr", addr, "--content", content])

        if not cfg.as_offline:
            ready = self._spawn("as", ["--bind", hp(self._bind("as")), "--secret", cfg.secret,
                                       "--store", str(self.store_path),
                                       "--log", str(self.run_dir / "as.log")])
            self.addresses["as"] = parse_hostport(ready["bind"])

        ready = self._spawn("ca", [
            "--frontend", hp(self._bind("ca")), "--as", hp(self._as_address()),
            "--secret", cfg.ca_secret or cfg.secret,
            "--enforcer", hp(self.addresses["enforcer_control"]),
            "--retransmit-interval", str(cfg.retransmit_interval),
            "--retransmit-budget", str(cfg.retransmit_budget)])
        self.addresses["ca"] = parse_hostport(ready["frontend"])

        ready = self._spawn("cmd", [
            "--subnet", cfg.subnet, "--ca", hp(self.addresses["ca"]),
            "--images", str(self.images_dir), "--control", hp(self._bind("cmd")),
            "--enforcer-data", data, "--host-address", cfg.host_address])
        self.addresses["cmd"] = parse_hostport(ready["control"])

    def reload_store(self, timeout: float = 5.0):
        """Make the AS reread the run directory's store file."""
        if self.config.as_offline:
            return
        if self.distributed:
            child = self._children["as"]
            child.proc.send_signal(signal.SIGHUP)
            child.expect("RELOADED", timeout=timeout)
        else:
            self._as_service.reload()

    def teardown(self):
        """Stop everything in reverse boot order; safe to call twice."""
        if self.control is not None:
            self.control.close()
            self.control = None
        for child in reversed(list(self._children.values())):
            try:
                child.stop()
            except Exception:
                log.exception("stopping %s failed", child.role)
        self._children.clear()
        for service in reversed(self._services):
            try:
                service.stop() if hasattr(service, "stop") else service.close()
            except Exception:
                log.exception("stopping %r failed", service)
        self._services.clear()
        self._as_service = None
        if self.run_dir is not None:
            shutil.rmtree(self.run_dir, ignore_errors=True)
            self.run_dir = None

    def __enter__(self):
        return self.boot()

    def __exit__(self, *exc):
        self.teardown()
