"""Scenario runners. Each returns one JSON-serializable report."""

from __future__ import annotations

import ipaddress
import random
import statistics
import threading
import time
from contextlib import contextmanager

from xrac.cmd import compute_digest
from xrac.config import TestbedConfig
from xrac.enforcer import WhitelistPair
from xrac.harness import Testbed
from xrac.store import AaStore, GroupBinding, RacProfile, dump_store, load_store

__all__ = [
    "SCHEMA", "EXPECTED_MATRIX", "scenario_validation", "scenario_latency",
    "scenario_concurrency", "scenario_tamper", "DEFAULT_SIZES", "SUM_TOLERANCE_MS",
    "AA_MEDIAN_LIMIT_MS", "CONCURRENCY_LIMIT_S", "VALIDATION_LIMIT_S",
]

SCHEMA = "xrac.report/1"
DEFAULT_SIZES = (1_000_000, 6_000_000, 60_000_000)
SUM_TOLERANCE_MS = 5.0
AA_MEDIAN_LIMIT_MS = 500.0
CONCURRENCY_LIMIT_S = 20.0
VALIDATION_LIMIT_S = 30.0

EXPECTED_MATRIX = {
    "pre-auth": {"host->public": "allow", "host->protected": "blocked"},
    "post-auth": {"rac->protected": "allow", "host->protected": "blocked",
                  "rac->public": "allow"},
    "post-stop": {"rac->protected": "blocked"},
}
# probes beyond the published experiment
EXTENSIONS = ["post-auth rac->public"]
EXPECTED_CONTENT = {"protected": "protected content", "public": "public content"}


def _report(scenario: str, tb: Testbed, **body) -> dict:
    return {"schema": SCHEMA, "scenario": scenario,
            "mode": "distributed" if tb.distributed else "inprocess", **body}


@contextmanager
def _testbed(config: TestbedConfig, distributed: bool):
    tb = Testbed(config, distributed=distributed)
    tb.boot()
    try:
        yield tb
    finally:
        tb.teardown()


@contextmanager
def _flipped(path, offset: int, mask: int):
    """Flip bits of one byte of an image file, restoring it afterwards."""
    with open(path, "r+b") as fh:
        fh.seek(offset)
        original = fh.read(1)[0]
        fh.seek(offset)
        fh.write(bytes([original ^ mask]))
    try:
        yield
    finally:
        with open(path, "r+b") as fh:
            fh.seek(offset)
            fh.write(bytes([original]))


def _dynamic(dump: dict) -> set[tuple[str, str]]:
    return {tuple(entry["pair"]) for entry in dump["dynamic"]}


def _pair(a, b) -> list[str]:
    return WhitelistPair(a, b).to_json()


# -- validation ------------------------------------------------------------------


def scenario_validation(config: TestbedConfig, *, distributed: bool = False) -> dict:
    t0 = time.monotonic()
    rng = random.Random(config.seed)
    expected_rac = ipaddress.IPv6Network(config.subnet)[1]
    matrix: dict[str, dict[str, str]] = {}
    content_errors: list[str] = []
    starts: list[dict] = []

    with _testbed(config, distributed) as tb:
        host = config.host_address
        targets = {"public": config.public, "protected": config.protected}

        def probe(checkpoint: str, label: str, src, dst_name: str):
            result = tb.data.fetch(src, targets[dst_name])
            cell = "allow" if result.status == "ok" else "blocked"
            matrix.setdefault(checkpoint, {})[f"{label}->{dst_name}"] = cell
            if cell == "allow" and EXPECTED_CONTENT[dst_name] not in (result.response or ""):
                content_errors.append(f"{checkpoint} {label}->{dst_name}: unexpected body")

        def start(label: str, image: str) -> dict:
            before = tb.control.dump()
            rec = tb.cmd.start(image, config.user, config.password)
            after = tb.control.dump()
            entry = {
                "label": label, "image": image, "user": config.user, "id": rec["id"],
                "state": rec["state"], "reason": rec["reason"], "addr": rec["addr"],
                "mutations": after["mutations"] - before["mutations"],
                "pairs_added": sorted(map(list, _dynamic(after) - _dynamic(before))),
            }
            starts.append(entry)
            return entry

        probe("pre-auth", "host", host, "public")
        probe("pre-auth", "host", host, "protected")

        blob = tb.images_dir / config.image
        size = blob.stat().st_size
        if size:
            with _flipped(blob, rng.randrange(size), 1 << rng.randrange(8)):
                start("tampered", config.image)
        else:
            starts.append({"label": "tampered", "state": "skipped", "reason": "empty image"})

        genuine = start("genuine", config.image)
        if genuine["state"] == "Running":
            rac = genuine["addr"]
            probe("post-auth", "rac", rac, "protected")
            probe("post-auth", "host", host, "protected")
            probe("post-auth", "rac", rac, "public")
            stopped = tb.cmd.stop(genuine["id"])
            genuine["stopped_state"] = stopped["state"]
            probe("post-stop", "rac", rac, "protected")
            genuine["pairs_after_stop"] = sorted(map(list, _dynamic(tb.control.dump())))

    expected_starts = {
        "tampered": {"state": "Denied", "mutations": 0, "pairs_added": []},
        "genuine": {"state": "Running", "mutations": 1,
                    "pairs_added": [_pair(expected_rac, config.protected)],
                    "pairs_after_stop": []},
    }
    diff = []
    for checkpoint, cells in EXPECTED_MATRIX.items():
        for cell, want in cells.items():
            got = matrix.get(checkpoint, {}).get(cell, "missing")
            if got != want:
                diff.append(f"{checkpoint} {cell}: expected {want}, observed {got}")
    for entry in starts:
        for key, want in expected_starts[entry["label"]].items():
            if entry.get(key) != want:
                diff.append(f"{entry['label']} start {key}: expected {want!r}, "
                            f"observed {entry.get(key)!r}")
    diff.extend(content_errors)
    elapsed = time.monotonic() - t0
    if elapsed >= VALIDATION_LIMIT_S:
        diff.append(f"runtime {elapsed:.1f} s exceeds {VALIDATION_LIMIT_S:.0f} s")
    return _report("validation", tb, ok=not diff, matrix=matrix, expected=EXPECTED_MATRIX,
                   starts=starts, extensions=EXTENSIONS, diff=diff,
                   timings={"elapsed_s": round(elapsed, 3)})


# -- latency ---------------------------------------------------------------------


def _median(xs):
    return statistics.median(xs) if xs else None


def _add_latency_images(tb: Testbed, config: TestbedConfig, sizes, seed: int) -> list[str]:
    rng = random.Random(seed)
    store = load_store(tb.store_path)
    racs, names = dict(store.racs), []
    for size in sizes:
        name = f"blob-{size}"
        blob = rng.randbytes(size)
        (tb.images_dir / name).write_bytes(blob)
        racs[name] = RacProfile(name, compute_digest(blob), (config.protected,))
        names.append(name)
    groups = (*store.groups,
              GroupBinding("latency", frozenset({config.user}), frozenset(names)))
    tb.store_path.write_text(dump_store(AaStore(store.users, racs, groups)))
    tb.reload_store()
    return names


def _measure(tb: Testbed, config: TestbedConfig, name: str, runs: int) -> list[dict]:
    out = []
    for _ in range(runs):
        rec = tb.cmd.start(name, config.user, config.password)
        if rec["state"] == "Running":
            tb.cmd.stop(rec["id"])
        t = rec["timings"]
        out.append({"state": rec["state"], "reason": rec["reason"],
                    **{k: t.get(k) for k in ("digest_ms", "aa_ms", "launch_ms", "total_ms")}})
    return out


def scenario_latency(config: TestbedConfig, *, sizes=DEFAULT_SIZES, runs: int = 3,
                     max_reruns: int = 2, distributed: bool = False) -> dict:
    sizes = list(sizes)
    diff: list[str] = []
    with _testbed(config, distributed) as tb:
        names = _add_latency_images(tb, config, sizes, config.seed)
        attempts = []
        for attempt in range(1 + max_reruns):
            per_size = {size: _measure(tb, config, name, runs) for size, name in zip(sizes, names)}
            medians = [_median([r["digest_ms"] for r in per_size[s] if r["digest_ms"] is not None])
                       for s in sizes]
            monotone = all(a is not None and b is not None and a <= b
                           for a, b in zip(medians, medians[1:]))
            attempts.append({"digest_median_ms": medians, "monotone": monotone})
            if monotone:
                break

    rows = []
    all_aa = []
    for size in sizes:
        samples = per_size[size]
        for r in samples:
            if r["state"] != "Running":
                diff.append(f"size {size}: start {r['state']} ({r['reason']})")
                continue
            parts = r["digest_ms"] + r["aa_ms"] + r["launch_ms"]
            r["residual_ms"] = r["total_ms"] - parts
            if abs(r["residual_ms"]) > SUM_TOLERANCE_MS:
                diff.append(f"size {size}: parts sum to {parts:.2f} ms, total {r['total_ms']:.2f} ms")
            all_aa.append(r["aa_ms"])
        row = {"size_bytes": size, "runs": samples}
        for key in ("digest_ms", "aa_ms", "launch_ms", "total_ms"):
            vals = [r[key] for r in samples if r[key] is not None]
            row[f"{key}_median"] = _median(vals)
            row[f"{key}_stdev"] = statistics.stdev(vals) if len(vals) > 1 else 0.0
        rows.append(row)

    if not attempts[-1]["monotone"]:
        diff.append(f"digest medians not monotone after {len(attempts)} attempts: "
                    f"{attempts[-1]['digest_median_ms']}")
    aa_median = _median(all_aa)
    if aa_median is None or aa_median >= AA_MEDIAN_LIMIT_MS:
        diff.append(f"AA median {aa_median} ms not below {AA_MEDIAN_LIMIT_MS:.0f} ms")
    return _report("latency", tb, ok=not diff, sizes=sizes, runs_per_size=runs,
                   breakdown=rows, attempts=attempts, aa_median_ms=aa_median,
                   tolerance_ms=SUM_TOLERANCE_MS, diff=diff)


# -- concurrency -----------------------------------------------------------------

# (user, password, image); whether each is allowed follows from the default store
CONCURRENCY_MIX = [
    ("alice", "wonderland", "wget"),
    ("bob", "builder", "curl"),
    ("alice", "not-the-password", "wget"),
    ("bob", "builder", "wget"),
    ("mallory", "guess", "curl"),
    ("alice", "wonderland", "wget-patched"),
    ("alice", "wonderland", "no-such-image"),
]


def _outcome(rec: dict) -> dict:
    return {"state": rec["state"], "reason": rec["reason"]}


def scenario_concurrency(config: TestbedConfig, *, n: int = 50,
                         distributed: bool = False) -> dict:
    rng = random.Random(config.seed)
    cases = [rng.choice(CONCURRENCY_MIX) for _ in range(n)]
    diff: list[str] = []
    with _testbed(config, distributed) as tb:
        sequential = []
        for i, (user, password, image) in enumerate(cases):
            rec = tb.cmd.start(image, user, password, name=f"seq-{i:03d}")
            sequential.append(_outcome(rec))
            if rec["state"] == "Running":
                tb.cmd.stop(rec["id"])

        records: list[dict | None] = [None] * n
        errors: list[str] = []
        barrier = threading.Barrier(n)

        def worker(i):
            user, password, image = cases[i]
            try:
                barrier.wait()
                records[i] = tb.cmd.start(image, user, password, name=f"con-{i:03d}")
            except Exception as exc:
                errors.append(f"case {i}: {exc}")

        threads = [threading.Thread(target=worker, args=(i,)) for i in range(n)]
        for t in threads:
            t.start()
        t0 = time.monotonic()
        for t in threads:
            t.join()
        elapsed = time.monotonic() - t0

        running = [r for r in records if r and r["state"] == "Running"]
        want_pairs = {tuple(_pair(r["addr"], p)) for r in running for p in r["cazd"]["peers"]}
        got_pairs = _dynamic(tb.control.dump())
        for r in running:
            tb.cmd.stop(r["id"])
        leftover = _dynamic(tb.control.dump())

    concurrent = [_outcome(r) if r else {"state": "error", "reason": None} for r in records]
    mismatches = [i for i in range(n) if sequential[i] != concurrent[i]]
    diff.extend(errors)
    diff.extend(f"case {i} {cases[i][:1] + cases[i][2:]}: sequential {sequential[i]}, "
                f"concurrent {concurrent[i]}" for i in mismatches)
    addrs = [r["addr"] for r in running]
    if len(set(addrs)) != len(addrs):
        diff.append("duplicate RAC addresses among running containers")
    if got_pairs != want_pairs:
        diff.append(f"whitelist holds {sorted(got_pairs)}, expected {sorted(want_pairs)}")
    if leftover:
        diff.append(f"pairs left after stopping all: {sorted(leftover)}")
    if elapsed >= CONCURRENCY_LIMIT_S:
        diff.append(f"concurrent phase took {elapsed:.1f} s")
    summary: dict[str, int] = {}
    for o in concurrent:
        key = o["state"] if o["reason"] is None else f"{o['state']}:{o['reason']}"
        summary[key] = summary.get(key, 0) + 1
    return _report("concurrency", tb, ok=not diff, n=n, seed=config.seed,
                   cases=[{"user": u, "image": img, "sequential": s, "concurrent": c}
                          for (u, _p, img), s, c in zip(cases, sequential, concurrent)],
                   summary=dict(sorted(summary.items())), mismatches=mismatches,
                   diff=diff, timings={"concurrent_s": round(elapsed, 3),
                                       "limit_s": CONCURRENCY_LIMIT_S})


# -- tamper ------------------------------------------------------------------------


def scenario_tamper(config: TestbedConfig, *, n: int = 100,
                    distributed: bool = False) -> dict:
    """Flip one random bit of the registered image per attempt; all must be denied."""
    rng = random.Random(config.seed)
    trials = []
    diff: list[str] = []
    with _testbed(config, distributed) as tb:
        blob = tb.images_dir / config.image
        size = blob.stat().st_size
        if size == 0:
            raise ValueError(f"image {config.image} is empty; nothing to mutate")
        mutations_before = tb.control.dump()["mutations"]
        for _ in range(n):
            offset, bit = rng.randrange(size), rng.randrange(8)
            with _flipped(blob, offset, 1 << bit):
                rec = tb.cmd.start(config.image, config.user, config.password)
            trials.append({"offset": offset, "bit": bit, **_outcome(rec)})
            if rec["state"] == "Running":
                tb.cmd.stop(rec["id"])
        mutations = tb.control.dump()["mutations"] - mutations_before
        # control: the untouched image must still be admitted
        control = tb.cmd.start(config.image, config.user, config.password)
        if control["state"] == "Running":
            tb.cmd.stop(control["id"])

    denied = sum(t["state"] == "Denied" for t in trials)
    if denied != n:
        diff.append(f"{n - denied} of {n} mutated images were admitted")
    if mutations:
        diff.append(f"enforcer saw {mutations} mutations during tampered starts")
    if control["state"] != "Running":
        diff.append(f"unmodified image was not admitted ({control['state']}, {control['reason']})")
    return _report("tamper", tb, ok=not diff, n=n, denied=denied, enforcer_mutations=mutations,
                   control=_outcome(control), trials=trials, diff=diff)
