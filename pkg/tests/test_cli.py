"""The ``xrac`` command line, in process and as subprocesses."""

import json
import socket
import subprocess
import sys

import pytest

from xrac.cli import EXIT_DEVIATION, EXIT_OK, EXIT_STARTUP, main
from xrac.config import load_config
from xrac.harness import Testbed
from xrac.net import format_hostport


def test_init_writes_loadable_testbed(tmp_path, capsys):
    assert main(["init", str(tmp_path / "a"), "--ephemeral"]) == EXIT_OK
    path = capsys.readouterr().out.strip()
    config = load_config(path)
    assert set(config.ports.values()) == {0}
    assert sorted(p.name for p in config.images.iterdir()) == ["curl", "wget", "wget-patched"]


def test_init_is_seeded(tmp_path):
    main(["init", str(tmp_path / "a"), "--seed", "3"])
    main(["init", str(tmp_path / "b"), "--seed", "3"])
    main(["init", str(tmp_path / "c"), "--seed", "4"])
    wget = [(tmp_path / d / "images" / "wget").read_bytes() for d in "abc"]
    assert wget[0] == wget[1] != wget[2]
    assert load_config(tmp_path / "a" / "config.toml").ports["ca"] == 5995


@pytest.fixture
def testbed(testbed_config):
    with Testbed(testbed_config) as tb:
        yield tb


def ctl(tb, *args):
    return main(["ctl", "--control", format_hostport(tb.addresses["cmd"]), *args])


def test_ctl_start_list_stop(testbed, capsys):
    assert ctl(testbed, "start", "wget", "--user", "alice", "--password", "wonderland",
               "--name", "w1") == EXIT_OK
    started = json.loads(capsys.readouterr().out)
    assert started["state"] == "Running" and started["id"] == "w1"
    assert ctl(testbed, "list") == EXIT_OK
    assert [c["id"] for c in json.loads(capsys.readouterr().out)] == ["w1"]
    assert ctl(testbed, "stop", "w1") == EXIT_OK
    assert json.loads(capsys.readouterr().out)["state"] == "Stopped"


def test_ctl_denied_and_errors(testbed, capsys):
    assert ctl(testbed, "start", "wget", "--user", "bob", "--password", "builder") == EXIT_DEVIATION
    assert json.loads(capsys.readouterr().out)["reason"] == "aa-failed"
    assert ctl(testbed, "stop", "nope") == EXIT_DEVIATION
    assert "no such container" in capsys.readouterr().err


def test_ctl_unreachable(capsys):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    assert main(["ctl", "--control", f"127.0.0.1:{port}", "list"]) == EXIT_STARTUP
    assert "cannot reach CMD" in capsys.readouterr().err


def test_missing_secret(tmp_path, capsys, monkeypatch):
    monkeypatch.delenv("XRAC_SECRET", raising=False)
    assert main(["as", "--bind", "127.0.0.1:0", "--store", str(tmp_path / "x")]) == EXIT_STARTUP
    assert "shared secret is required" in capsys.readouterr().err


def test_missing_store(tmp_path, capsys):
    assert main(["as", "--bind", "127.0.0.1:0", "--secret", "s",
                 "--store", str(tmp_path / "absent.conf")]) == EXIT_STARTUP
    assert "cannot load store" in capsys.readouterr().err


def test_bad_scenario_config(tmp_path, capsys):
    assert main(["scenario", "validation", "--config", str(tmp_path / "none.toml")]) == EXIT_STARTUP


def test_bad_static_pair(capsys):
    assert main(["enforcer", "--data", "127.0.0.1:0", "--control", "127.0.0.1:0",
                 "--static", "only-one"]) == EXIT_STARTUP


def test_as_process_port_conflict(tmp_path, testbed_config):
    with socket.socket(socket.AF_INET, socket.SOCK_DGRAM) as busy:
        busy.bind(("127.0.0.1", 0))
        port = busy.getsockname()[1]
        proc = subprocess.run(
            [sys.executable, "-m", "xrac", "as", "--bind", f"127.0.0.1:{port}", "--secret", "s",
             "--store", str(testbed_config.store)],
            capture_output=True, text=True, timeout=30)
    assert proc.returncode == EXIT_STARTUP
    assert f"as: cannot bind UDP 127.0.0.1:{port}" in proc.stderr


def test_scenario_command_writes_report_and_figures(tmp_path, testbed_config_path, capsys):
    out = tmp_path / "report.json"
    figures = tmp_path / "fig"
    code = main(["scenario", "validation", "--config", str(testbed_config_path),
                 "--out", str(out), "--figures", str(figures)])
    assert code == EXIT_OK
    report = json.loads(out.read_text())
    assert report["ok"] and report["scenario"] == "validation"
    assert (figures / "validation_matrix.png").stat().st_size > 0
    assert (figures / "validation_matrix.csv").read_text().startswith("checkpoint")
    assert "scenario validation: ok" in capsys.readouterr().err
