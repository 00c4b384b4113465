"""Testbed lifecycle, fault injection, store reload and report determinism."""

import json
import socket

import pytest

from xrac.harness import Testbed
from xrac.net import StartupError
from xrac.scenarios import SCHEMA, scenario_tamper, scenario_validation
from xrac.store import GroupBinding, dump_store, load_store

MODES = [pytest.param(False, id="inprocess"), pytest.param(True, id="distributed")]


def rebindable(addresses) -> bool:
    for key, (host, port) in addresses.items():
        kind = socket.SOCK_DGRAM if key in ("as", "ca") else socket.SOCK_STREAM
        with socket.socket(socket.AF_INET, kind) as s:
            if kind == socket.SOCK_STREAM:
                s.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
            s.bind((host, port))
    return True


def test_boot_teardown_cycles(testbed_config):
    for _ in range(20):
        tb = Testbed(testbed_config).boot()
        addresses = dict(tb.addresses)
        run_dir = tb.run_dir
        assert set(addresses) == {"as", "ca", "cmd", "enforcer_data", "enforcer_control"}
        assert tb.cmd.list() == []
        tb.teardown()
        tb.teardown()
        assert not run_dir.exists()
        assert rebindable(addresses)


def test_distributed_boot_teardown_cycles(testbed_config):
    for _ in range(3):
        with Testbed(testbed_config, distributed=True) as tb:
            addresses = dict(tb.addresses)
            assert tb.control.dump()["static"] == [["2001:db8::11:0/116", "2001:db8::bb:0"]]
        assert rebindable(addresses)


@pytest.mark.parametrize("distributed", MODES)
def test_port_conflict_names_the_role(testbed_config, distributed):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as busy:
        busy.bind(("127.0.0.1", 0))
        port = busy.getsockname()[1]
        config = testbed_config.with_(ports={**testbed_config.ports, "as": port})
        tb = Testbed(config, distributed=distributed)
        with pytest.raises(StartupError, match=rf"as: cannot bind UDP 127\.0\.0\.1:{port}"):
            tb.boot()
        assert tb.run_dir is None and tb.addresses.get("as") is None


@pytest.mark.parametrize("distributed", MODES)
def test_mismatched_secret_denies(testbed_config, distributed):
    config = testbed_config.with_(ca_secret="not-the-shared-secret")
    with Testbed(config, distributed=distributed) as tb:
        rec = tb.cmd.start("wget", "alice", "wonderland")
        assert rec["state"] == "Denied" and rec["reason"] == "aa-failed"
        assert tb.control.dump()["mutations"] == 0


@pytest.mark.parametrize("distributed", MODES)
def test_server_offline_denies(testbed_config, distributed):
    with Testbed(testbed_config.with_(as_offline=True), distributed=distributed) as tb:
        assert "as" not in tb.addresses
        rec = tb.cmd.start("wget", "alice", "wonderland")
        assert rec["state"] == "Denied"
        assert not tb.data.fetch(rec["addr"] or "2001:db8::11:1", "2001:db8::aa:0").allowed
        assert tb.control.dump()["mutations"] == 0


@pytest.mark.parametrize("distributed", MODES)
def test_reload_store(testbed_config, distributed):
    with Testbed(testbed_config, distributed=distributed) as tb:
        assert tb.cmd.start("wget", "bob", "builder")["state"] == "Denied"
        store = load_store(tb.store_path)
        groups = (*store.groups, GroupBinding("ops", frozenset({"bob"}), frozenset({"wget"})))
        tb.store_path.write_text(dump_store(type(store)(store.users, store.racs, groups)))
        tb.reload_store()
        rec = tb.cmd.start("wget", "bob", "builder")
        assert rec["state"] == "Running"
        tb.cmd.stop(rec["id"])


def test_run_dir_isolates_source(testbed_config):
    before = testbed_config.store.read_text()
    with Testbed(testbed_config) as tb:
        tb.store_path.write_text("")
        (tb.images_dir / "wget").write_bytes(b"changed")
    assert testbed_config.store.read_text() == before
    assert (testbed_config.images / "wget").stat().st_size > 7


def strip_timings(obj):
    if isinstance(obj, dict):
        return {k: strip_timings(v) for k, v in obj.items()
                if k != "timings" and not k.endswith("_ms") and k != "elapsed_s"}
    if isinstance(obj, list):
        return [strip_timings(v) for v in obj]
    return obj


def test_reports_are_deterministic(testbed_config):
    first = scenario_tamper(testbed_config, n=5)
    second = scenario_tamper(testbed_config, n=5)
    assert first["schema"] == SCHEMA
    assert json.dumps(strip_timings(first)) == json.dumps(strip_timings(second))
    other = scenario_tamper(testbed_config.with_(seed=99), n=5)
    assert other["trials"] != first["trials"]


@pytest.mark.parametrize("distributed", MODES)
def test_validation_in_both_modes(testbed_config, distributed):
    report = scenario_validation(testbed_config, distributed=distributed)
    assert report["ok"], report["diff"]
    assert report["mode"] == ("distributed" if distributed else "inprocess")
    assert strip_timings(report)["matrix"] == report["expected"]
