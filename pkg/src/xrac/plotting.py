"""Figures (PNG) and tables (CSV) for scenario reports."""

from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

__all__ = ["render_report", "style"]

ALLOW, BLOCKED = "#4c9a5b", "#c2474a"
PARTS = (("digest_ms", "digest", "#5b7db1"), ("aa_ms", "AA", "#e0a33b"),
         ("launch_ms", "launch", "#8a8a8a"))


def style(ax, grid_axis: str | None = "y"):
    for side in ("top", "right"):
        ax.spines[side].set_visible(False)
    for side in ("left", "bottom"):
        ax.spines[side].set(linewidth=1.0, color="0.6")
    ax.tick_params(color="0.6", labelsize=8)
    if grid_axis:
        ax.grid(True, axis=grid_axis, alpha=0.25, linestyle="-")
        ax.set_axisbelow(True)


def _write_csv(path: Path, header, rows) -> Path:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


def _save(fig, path: Path) -> Path:
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
    return path


def _validation(report: dict, out: Path) -> list[Path]:
    cells = [(cp, probe, v) for cp, row in report["matrix"].items() for probe, v in row.items()]
    expected = report["expected"]
    rows = [(cp, probe, v, expected.get(cp, {}).get(probe, "")) for cp, probe, v in cells]
    paths = [_write_csv(out / "validation_matrix.csv",
                        ["checkpoint", "probe", "observed", "expected"], rows)]

    checkpoints = list(expected)
    probes = sorted({p for row in expected.values() for p in row})
    fig, ax = plt.subplots(figsize=(6.4, 2.6))
    for y, cp in enumerate(checkpoints):
        for x, probe in enumerate(probes):
            got = report["matrix"].get(cp, {}).get(probe)
            want = expected[cp].get(probe)
            if got is None and want is None:
                continue
            color = {"allow": ALLOW, "blocked": BLOCKED}.get(got, "white")
            ax.add_patch(plt.Rectangle((x, y), 0.95, 0.9, color=color))
            mark = "" if got == want else " (!)"
            ax.text(x + 0.475, y + 0.45, f"{got or 'missing'}{mark}", ha="center",
                    va="center", fontsize=8, color="white" if got else "black")
    ax.set_xlim(0, len(probes))
    ax.set_ylim(len(checkpoints), 0)
    ax.set_xticks([i + 0.475 for i in range(len(probes))], probes)
    ax.set_yticks([i + 0.45 for i in range(len(checkpoints))], checkpoints)
    style(ax, grid_axis=None)
    ax.set_title("reachability through the enforcer", fontsize=9)
    paths.append(_save(fig, out / "validation_matrix.png"))
    return paths


def _latency(report: dict, out: Path) -> list[Path]:
    rows = []
    for row in report["breakdown"]:
        for i, r in enumerate(row["runs"]):
            rows.append([row["size_bytes"], i, r["digest_ms"], r["aa_ms"], r["launch_ms"],
                         r["total_ms"], r.get("residual_ms")])
    paths = [_write_csv(out / "latency_runs.csv", ["size_bytes", "run", "digest_ms", "aa_ms",
                                                    "launch_ms", "total_ms", "residual_ms"], rows)]

    breakdown = report["breakdown"]
    labels = [f"{b['size_bytes'] / 1e6:g} MB" for b in breakdown]
    fig, ax = plt.subplots(figsize=(4.8, 3.2))
    bottom = [0.0] * len(breakdown)
    for key, name, color in PARTS:
        vals = [b.get(f"{key}_median") or 0.0 for b in breakdown]
        ax.bar(labels, vals, 0.6, bottom=bottom, label=name, color=color)
        bottom = [a + v for a, v in zip(bottom, vals)]
    totals = [b.get("total_ms_median") or 0.0 for b in breakdown]
    ax.scatter(labels, totals, marker="_", s=400, color="black", label="total", zorder=3)
    ax.set_ylabel("median startup time [ms]", fontsize=8)
    ax.legend(frameon=False, fontsize=7)
    style(ax)
    paths.append(_save(fig, out / "latency_breakdown.png"))
    return paths


def _concurrency(report: dict, out: Path) -> list[Path]:
    rows = [[i, c["user"], c["image"], c["sequential"]["state"], c["sequential"]["reason"],
             c["concurrent"]["state"], c["concurrent"]["reason"]]
            for i, c in enumerate(report["cases"])]
    paths = [_write_csv(out / "concurrency_cases.csv",
                        ["case", "user", "image", "seq_state", "seq_reason",
                         "con_state", "con_reason"], rows)]

    def counts(phase):
        out_ = {}
        for c in report["cases"]:
            o = c[phase]
            key = o["state"] if not o["reason"] else f"{o['state']}\n{o['reason']}"
            out_[key] = out_.get(key, 0) + 1
        return out_

    seq, con = counts("sequential"), counts("concurrent")
    keys = sorted(set(seq) | set(con))
    xs = range(len(keys))
    fig, ax = plt.subplots(figsize=(5.2, 3.0))
    ax.bar([x - 0.2 for x in xs], [seq.get(k, 0) for k in keys], 0.4, label="sequential",
           color="#8a8a8a")
    ax.bar([x + 0.2 for x in xs], [con.get(k, 0) for k in keys], 0.4, label="concurrent",
           color="#5b7db1")
    ax.set_xticks(list(xs), keys, fontsize=7)
    ax.set_ylabel("starts", fontsize=8)
    ax.set_title(f"n={report['n']}, concurrent phase {report['timings']['concurrent_s']:.2f} s",
                 fontsize=9)
    ax.legend(frameon=False, fontsize=7)
    style(ax)
    paths.append(_save(fig, out / "concurrency_outcomes.png"))
    return paths


def _tamper(report: dict, out: Path) -> list[Path]:
    rows = [[i, t["offset"], t["bit"], t["state"], t["reason"]]
            for i, t in enumerate(report["trials"])]
    paths = [_write_csv(out / "tamper_trials.csv",
                        ["trial", "offset", "bit", "state", "reason"], rows)]
    fig, ax = plt.subplots(figsize=(5.2, 2.4))
    colors = [BLOCKED if t["state"] == "Denied" else ALLOW for t in report["trials"]]
    ax.scatter([t["offset"] for t in report["trials"]], [t["bit"] for t in report["trials"]],
               c=colors, s=12)
    ax.set_xlabel("mutated byte offset", fontsize=8)
    ax.set_ylabel("bit", fontsize=8)
    ax.set_title(f"{report['denied']}/{report['n']} mutated images denied", fontsize=9)
    style(ax)
    paths.append(_save(fig, out / "tamper_trials.png"))
    return paths


_RENDERERS = {"validation": _validation, "latency": _latency,
              "concurrency": _concurrency, "tamper": _tamper}


def render_report(report: dict, directory) -> list[Path]:
    """Write the figure and CSV table(s) for ``report`` into ``directory``."""
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    return _RENDERERS[report["scenario"]](report, out)
