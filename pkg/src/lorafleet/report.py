"""Render probe outputs: delimited trace/metric files plus figures.

The probe runner writes traces.csv and metrics.json; the report step reads
them back, recomputes summary metrics, and renders PNG figures next to the
delimited output (latency percentiles per path, the cold-load staircase,
and ladder curves when per-target rows exist).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from . import loadgen

TRACE_FIELDS = ("request_id", "policy", "arrival_ms", "path", "ttft_ms", "e2e_ms", "load_ms", "group")


@dataclass
class TraceRow:
    request_id: str
    policy: str
    arrival_ms: int
    path: str
    ttft_ms: int | None
    e2e_ms: int | None
    load_ms: int
    group: str = ""


def write_traces_csv(path: Path, traces) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_FIELDS)
        for t in traces:
            writer.writerow(
                [
                    t.request_id,
                    t.policy,
                    t.arrival_ms,
                    t.path,
                    "" if t.ttft_ms is None else t.ttft_ms,
                    "" if t.e2e_ms is None else t.e2e_ms,
                    t.load_ms,
                    t.group,
                ]
            )
    return path


def read_traces_csv(path: Path) -> list[TraceRow]:
    rows = []
    with open(path, newline="") as fh:
        for doc in csv.DictReader(fh):
            rows.append(
                TraceRow(
                    request_id=doc["request_id"],
                    policy=doc["policy"],
                    arrival_ms=int(doc["arrival_ms"]),
                    path=doc["path"],
                    ttft_ms=int(doc["ttft_ms"]) if doc["ttft_ms"] else None,
                    e2e_ms=int(doc["e2e_ms"]) if doc["e2e_ms"] else None,
                    load_ms=int(doc["load_ms"] or 0),
                    group=doc.get("group", ""),
                )
            )
    return rows


def write_metrics_json(path: Path, stats: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n")
    return path


def _percentile_figure(rows: list[TraceRow], out: Path) -> Path | None:
    by_path: dict[str, list[int]] = {}
    for r in rows:
        if r.ttft_ms is not None:
            by_path.setdefault(r.path, []).append(r.ttft_ms)
    if not by_path:
        return None
    labels = sorted(by_path)
    p50 = [loadgen.nearest_rank(sorted(by_path[k]), 50) / 1000 for k in labels]
    p95 = [loadgen.nearest_rank(sorted(by_path[k]), 95) / 1000 for k in labels]
    fig, ax = plt.subplots(figsize=(6, 3.4))
    x = range(len(labels))
    ax.bar([i - 0.18 for i in x], p50, width=0.36, label="ttft p50")
    ax.bar([i + 0.18 for i in x], p95, width=0.36, label="ttft p95")
    ax.set_xticks(list(x))
    ax.set_xticklabels(labels)
    ax.set_ylabel("seconds")
    ax.set_title("TTFT percentiles by path")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def _staircase_figure(rows: list[TraceRow], out: Path) -> Path | None:
    loads = sorted(r.load_ms for r in rows if r.path == "cold_load" and r.load_ms > 0)
    if len(loads) < 2:
        return None
    fig, ax = plt.subplots(figsize=(5, 3.4))
    ax.plot(range(1, len(loads) + 1), [v / 1000 for v in loads], marker="o", ms=3)
    ax.set_xlabel("distinct adapters loaded")
    ax.set_ylabel("load completion (s)")
    ax.set_title("Cold-load staircase")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def _ladder_figure(per_target: list[dict], out: Path) -> Path | None:
    if not per_target:
        return None
    targets = [r["target"] for r in per_target]
    loaded = [r["loaded_count"] for r in per_target]
    p95 = [(r["ttft_p95"] or 0) / 1000 for r in per_target]
    fig, ax = plt.subplots(figsize=(5.5, 3.4))
    ax.bar(range(len(targets)), loaded, width=0.5, label="loaded adapters")
    ax.set_xticks(range(len(targets)))
    ax.set_xticklabels([str(t) for t in targets])
    ax.set_xlabel("requested target")
    ax.set_ylabel("loaded adapters")
    ax2 = ax.twinx()
    ax2.plot(range(len(targets)), p95, color="tab:orange", marker="o", label="steady p95")
    ax2.set_ylabel("ttft p95 (s)")
    ax.set_title("Cache ladder")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render_report(traces_dir: Path, out_dir: Path | None = None) -> dict:
    """Recompute metrics from a probe output directory and render figures.

    Returns the report document; writes report.json, summary.csv, and any
    applicable PNG figures into `out_dir` (defaults to the traces dir).
    """
    traces_dir = Path(traces_dir)
    out_dir = Path(out_dir) if out_dir else traces_dir
    out_dir.mkdir(parents=True, exist_ok=True)
    rows = read_traces_csv(traces_dir / "traces.csv")
    stats = {}
    metrics_path = traces_dir / "metrics.json"
    if metrics_path.exists():
        stats = json.loads(metrics_path.read_text())

    report = loadgen.compute_metrics(rows)
    doc = {"metrics": report.to_json(), "stats": stats, "figures": []}

    groups = sorted({r.group for r in rows if r.group})
    doc["per_group"] = {
        g: loadgen.compute_metrics([r for r in rows if r.group == g]).to_json()
        for g in groups
    }

    fig = _percentile_figure(rows, out_dir / "ttft_percentiles.png")
    if fig:
        doc["figures"].append(fig.name)
    fig = _staircase_figure(rows, out_dir / "cold_staircase.png")
    if fig:
        doc["figures"].append(fig.name)
    per_target = stats.get("per_target") if isinstance(stats, dict) else None
    fig = _ladder_figure(per_target or [], out_dir / "cache_ladder.png")
    if fig:
        doc["figures"].append(fig.name)

    with open(out_dir / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for key, value in sorted(report.to_json().items()):
            if key == "per_path":
                for path_name, count in sorted(value.items()):
                    writer.writerow([f"path_{path_name}", count])
            else:
                writer.writerow([key, value])

    (out_dir / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return doc
