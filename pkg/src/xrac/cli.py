"""``xrac`` command line: service daemons, container control, scenarios."""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path

from xrac.net import StartupError, format_hostport, parse_hostport

log = logging.getLogger("xrac.cli")

EXIT_OK, EXIT_DEVIATION, EXIT_STARTUP = 0, 1, 2


def _hostport(default_port: int | None = None):
    def parse(text: str):
        try:
            return parse_hostport(text, default_port)
        except ValueError as exc:
            raise argparse.ArgumentTypeError(str(exc)) from None
    return parse


def _secret(args) -> bytes:
    secret = args.secret or os.environ.get("XRAC_SECRET")
    if not secret:
        raise StartupError("a shared secret is required (--secret or XRAC_SECRET)")
    return secret.encode()


def _ready(role: str, **addresses):
    print(f"READY {role} " + json.dumps({k: format_hostport(v) for k, v in addresses.items()}),
          flush=True)


def _serve(on_hup=None):
    """Block until SIGTERM/SIGINT; run ``on_hup`` on SIGHUP."""
    stop = threading.Event()
    hup = threading.Event()
    signal.signal(signal.SIGTERM, lambda *_: stop.set())
    signal.signal(signal.SIGINT, lambda *_: stop.set())
    if on_hup is not None:
        signal.signal(signal.SIGHUP, lambda *_: hup.set())
    while not stop.wait(0.2):
        if hup.is_set():
            hup.clear()
            on_hup()


# -- daemons ----------------------------------------------------------------------


def cmd_as(args) -> int:
    from xrac.server import AsService
    from xrac.store import StoreParseError, load_store

    secret = _secret(args)
    try:
        store = load_store(args.store)
    except (OSError, StoreParseError) as exc:
        raise StartupError(f"as: cannot load store {args.store}: {exc}") from None
    service = AsService(args.bind, secret, args.store, store=store, log_path=args.log).start()
    _ready("as", bind=service.address)

    def reload():
        try:
            service.reload()
            print("RELOADED", flush=True)
        except (OSError, StoreParseError) as exc:
            # keep serving the previous store
            log.error("reload failed: %s", exc)
            print(f"RELOAD-FAILED {exc}", flush=True)

    try:
        _serve(on_hup=reload)
    finally:
        service.stop()
    return EXIT_OK


def cmd_ca(args) -> int:
    from xrac.authenticator import CaService
    from xrac.enforcer import EnforcerControlClient

    enforcer = EnforcerControlClient(args.enforcer)
    service = CaService(args.frontend, args.as_addr, _secret(args), enforcer,
                        nas_identifier=args.nas_identifier,
                        retransmit_interval=args.retransmit_interval,
                        retransmit_budget=args.retransmit_budget).start()
    _ready("ca", frontend=service.address)
    try:
        _serve()
    finally:
        service.stop()
        enforcer.close()
    return EXIT_OK


def cmd_cmd(args) -> int:
    from xrac.cmd import CmdService, ContainerManager, ImageStore
    from xrac.enforcer import EnforcerDataClient

    if not Path(args.images).is_dir():
        raise StartupError(f"cmd: image directory {args.images} does not exist")
    relay = EnforcerDataClient(args.enforcer_data) if args.enforcer_data else None
    manager = ContainerManager(ImageStore(args.images), args.ca, subnet=args.subnet,
                               host_address=args.host_address, relay=relay,
                               cs_timeout=args.cs_timeout, cs_budget=args.cs_budget)
    service = CmdService(args.control, manager).start()
    _ready("cmd", control=service.address)
    try:
        _serve()
    finally:
        service.stop()
    return EXIT_OK


def _static_pairs(args) -> list[tuple[str, str]]:
    pairs = []
    if args.config:
        from xrac.config import load_config
        try:
            pairs.extend(load_config(args.config).static_pairs)
        except (OSError, ValueError) as exc:
            raise StartupError(f"enforcer: cannot load {args.config}: {exc}") from None
    for text in args.static or ():
        parts = [p.strip() for p in text.split(",")]
        if len(parts) != 2 or not all(parts):
            raise StartupError(f"enforcer: --static expects A,B, got {text!r}")
        pairs.append(tuple(parts))
    return pairs


def cmd_enforcer(args) -> int:
    from xrac.enforcer import EnforcerService

    service = EnforcerService(args.data, args.control, _static_pairs(args)).start()
    _ready("enforcer", data=service.data_address, control=service.control_address)
    try:
        _serve()
    finally:
        service.stop()
    return EXIT_OK


def cmd_server(args) -> int:
    from xrac.enforcer import EnforcerDataClient, web_page

    endpoint = EnforcerDataClient(args.enforcer_data).attach(args.addr, web_page(args.content))
    print(f"READY server {json.dumps({'addr': str(endpoint.addr)})}", flush=True)
    try:
        _serve()
    finally:
        endpoint.close()
    return EXIT_OK


# -- control ----------------------------------------------------------------------


def cmd_ctl(args) -> int:
    from xrac.cmd import CmdClient, CmdError

    client = CmdClient(args.control)
    try:
        if args.action == "start":
            out = client.start(args.image, args.user, args.password, args.name)
        elif args.action == "stop":
            out = client.stop(args.id)
        else:
            out = client.list()
    except CmdError as exc:
        print(f"xrac: error: {exc}", file=sys.stderr)
        return EXIT_DEVIATION
    except OSError as exc:
        print(f"xrac: error: cannot reach CMD at {format_hostport(args.control)}: {exc}",
              file=sys.stderr)
        return EXIT_STARTUP
    print(json.dumps(out, indent=2))
    if args.action == "start" and out["state"] != "Running":
        return EXIT_DEVIATION
    return EXIT_OK


# -- scenarios --------------------------------------------------------------------


def cmd_scenario(args) -> int:
    from xrac import scenarios
    from xrac.config import load_config

    try:
        config = load_config(args.config)
    except (OSError, ValueError) as exc:
        raise StartupError(f"cannot load testbed config {args.config}: {exc}") from None
    if args.seed is not None:
        config = config.with_(seed=args.seed)
    kw = {"distributed": args.distributed}
    if args.name == "validation":
        report = scenarios.scenario_validation(config, **kw)
    elif args.name == "latency":
        sizes = [int(float(s) * 1_000_000) for s in args.sizes.split(",")] if args.sizes \
            else scenarios.DEFAULT_SIZES
        report = scenarios.scenario_latency(config, sizes=sizes, runs=args.runs, **kw)
    elif args.name == "concurrency":
        report = scenarios.scenario_concurrency(config, n=args.n or 50, **kw)
    else:
        report = scenarios.scenario_tamper(config, n=args.n or 100, **kw)

    text = json.dumps(report, indent=2, sort_keys=False)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    if args.figures:
        from xrac.plotting import render_report
        for path in render_report(report, args.figures):
            print(f"wrote {path}", file=sys.stderr)
    status = "ok" if report["ok"] else "DEVIATION"
    print(f"scenario {args.name}: {status}", file=sys.stderr)
    for line in report.get("diff", []):
        print(f"  {line}", file=sys.stderr)
    return EXIT_OK if report["ok"] else EXIT_DEVIATION


def cmd_init(args) -> int:
    from xrac.config import EPHEMERAL_PORTS, write_default_testbed

    path = write_default_testbed(args.dir, seed=args.seed,
                                 ports=EPHEMERAL_PORTS if args.ephemeral else None)
    print(path)
    return EXIT_OK


# -- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="xrac", description="Restricted application container "
                                "control plane: AS, CA, CMD, enforcer and scenario harness.")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("as", help="authentication server (RADIUS)")
    s.add_argument("--bind", type=_hostport(1812), default=("127.0.0.1", 1812))
    s.add_argument("--secret")
    s.add_argument("--store", required=True)
    s.add_argument("--log", help="append decision lines to this file")
    s.set_defaults(func=cmd_as)

    s = sub.add_parser("ca", help="container authenticator (EAPoUDP to RADIUS relay)")
    s.add_argument("--frontend", type=_hostport(5995), default=("127.0.0.1", 5995))
    s.add_argument("--as", dest="as_addr", type=_hostport(1812), required=True)
    s.add_argument("--secret")
    s.add_argument("--enforcer", type=_hostport(6633), required=True,
                   help="enforcer control address")
    s.add_argument("--nas-identifier", default="xrac-ca")
    s.add_argument("--retransmit-interval", type=float, default=2.0)
    s.add_argument("--retransmit-budget", type=int, default=3)
    s.set_defaults(func=cmd_ca)

    s = sub.add_parser("cmd", help="simulated container manager")
    s.add_argument("--subnet", default="2001:db8::11:0/116")
    s.add_argument("--ca", type=_hostport(5995), required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--control", type=_hostport(7070), default=("127.0.0.1", 7070))
    s.add_argument("--enforcer-data", type=_hostport(6634))
    s.add_argument("--host-address", default="2001:db8::11:fff")
    s.add_argument("--cs-timeout", type=float, default=2.0)
    s.add_argument("--cs-budget", type=int, default=3)
    s.set_defaults(func=cmd_cmd)

    s = sub.add_parser("ctl", help="talk to a running CMD")
    s.add_argument("--control", type=_hostport(7070), default=("127.0.0.1", 7070))
    actions = s.add_subparsers(dest="action", required=True)
    a = actions.add_parser("start")
    a.add_argument("image")
    a.add_argument("--user", required=True)
    a.add_argument("--password", required=True)
    a.add_argument("--name")
    a = actions.add_parser("stop")
    a.add_argument("id")
    actions.add_parser("list")
    s.set_defaults(func=cmd_ctl)

    s = sub.add_parser("enforcer", help="whitelist enforcer and endpoint relay")
    s.add_argument("--data", type=_hostport(6634), default=("127.0.0.1", 6634))
    s.add_argument("--control", type=_hostport(6633), default=("127.0.0.1", 6633))
    s.add_argument("--static", action="append", metavar="A,B",
                   help="static pair of addresses or prefixes (repeatable)")
    s.add_argument("--config", help="take static pairs from a testbed config")
    s.set_defaults(func=cmd_enforcer)

    s = sub.add_parser("server", help="stub web server attached to the enforcer")
    s.add_argument("--enforcer-data", type=_hostport(6634), required=True)
    s.add_argument("--addr", required=True)
    s.add_argument("--content", required=True)
    s.set_defaults(func=cmd_server)

    s = sub.add_parser("scenario", help="boot a testbed and run a scenario")
    s.add_argument("name", choices=["validation", "latency", "concurrency", "tamper"])
    s.add_argument("--config", required=True)
    s.add_argument("--distributed", action="store_true",
                   help="run each service as its own process")
    s.add_argument("--out", help="write the JSON report here instead of stdout")
    s.add_argument("--figures", metavar="DIR", help="render PNG figures and CSV tables")
    s.add_argument("--seed", type=int)
    s.add_argument("--sizes", help="latency: comma-separated image sizes in MB")
    s.add_argument("--runs", type=int, default=3, help="latency: runs per size")
    s.add_argument("-n", type=int, help="concurrency/tamper: number of starts")
    s.set_defaults(func=cmd_scenario)

    s = sub.add_parser("init", help="write a default testbed (config, store, images)")
    s.add_argument("dir")
    s.add_argument("--seed", type=int, default=7)
    s.add_argument("--ephemeral", action="store_true", help="use OS-assigned ports")
    s.set_defaults(func=cmd_init)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except StartupError as exc:
        print(f"xrac: error: {exc}", file=sys.stderr)
        return EXIT_STARTUP


if __name__ == "__main__":
    sys.exit(main())
