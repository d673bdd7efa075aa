"""Rendering: aligned text tables, CSV/JSON files and PNG figures.

Figures go next to the delimited files they are drawn from, so every plot
can be regenerated from its CSV."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable, Sequence

from .memmodel import FootprintReport
from .simcore import EVENT_COLUMNS, EventKind, RunReport, Stream

GIB = 2**30
_STYLE = {
    "figure.dpi": 110,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
}


def _pyplot():
    # imported on first use: matplotlib dominates CLI start-up time otherwise
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    plt.rcParams.update(_STYLE)
    return plt


def _cell(v) -> str:
    if isinstance(v, float):
        return f"{v:.4g}"
    return "" if v is None else str(v)


def format_table(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    if not rows:
        return "(no rows)"
    columns = list(columns or rows[0].keys())
    cells = [[_cell(r.get(c)) for c in columns] for r in rows]
    widths = [max(len(c), *(len(row[i]) for row in cells)) for i, c in enumerate(columns)]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths)),
             "  ".join("-" * w for w in widths)]
    lines += ["  ".join(v.ljust(w) for v, w in zip(row, widths)) for row in cells]
    return "\n".join(lines)


def to_csv(rows: Sequence[dict], columns: Sequence[str] | None = None) -> str:
    buf = io.StringIO()
    columns = list(columns or (rows[0].keys() if rows else []))
    w = csv.DictWriter(buf, fieldnames=columns, extrasaction="ignore", lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow(r)
    return buf.getvalue()


def render(rows: Sequence[dict], fmt: str, columns: Sequence[str] | None = None) -> str:
    if fmt == "csv":
        return to_csv(rows, columns).rstrip("\n")
    if fmt == "json":
        return json.dumps(list(rows), indent=2, default=str)
    return format_table(rows, columns)


def write_csv(path: Path, rows: Sequence[dict], columns: Sequence[str] | None = None) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(to_csv(rows, columns))
    return path


def write_json(path: Path, doc) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2, default=str) + "\n")
    return path


def event_rows(report: RunReport) -> list[dict]:
    return [dict(zip(EVENT_COLUMNS, e.as_row())) for e in report.events]


def pool_trace_rows(report: RunReport) -> list[dict]:
    cols = ("time_ns", "op", "tag", "offset", "bytes", "current", "high_water")
    return [dict(zip(cols, t)) for t in report.pool_trace or ()]


# -- figures ---------------------------------------------------------------

def _step(timeline: Iterable[tuple[int, int]], end: int):
    xs, ys = [], []
    for t, v in timeline:
        xs.append(t * 1e-9)
        ys.append(v / GIB)
    if xs:
        xs.append(max(end * 1e-9, xs[-1]))
        ys.append(ys[-1])
    return xs, ys


def plot_run(report: RunReport, path: Path, capacity: int | None = None) -> Path:
    """Device and host memory over time, with both queues as bars below."""
    plt = _pyplot()
    fig, (ax, lanes) = plt.subplots(2, 1, figsize=(7.5, 4.6), sharex=True,
                                    gridspec_kw={"height_ratios": [3, 1]})
    end = max((e.end for e in report.events), default=report.total_ns)
    xs, ys = _step(report.mem_timeline, end)
    ax.step(xs, ys, where="post", color="C0", lw=1.2, label="device")
    hx, hy = _step(report.host_timeline, end)
    ax.step(hx, hy, where="post", color="C1", lw=1.0, ls="--", label="host (offloaded)")
    if capacity is not None:
        ax.axhline(capacity / GIB, color="k", lw=0.8, ls=":", label="capacity")
    ax.axhline(report.avg_mem_bytes / GIB, color="C0", lw=0.8, ls="-.", alpha=0.7, label="device average")
    ax.set_ylabel("memory (GiB)")
    ax.set_title(f"{report.label}: {report.verdict}", fontsize=9)
    ax.legend(loc="upper right", fontsize=7, frameon=False)

    colors = {EventKind.FWD: "C0", EventKind.BWD: "C2", EventKind.SYNC: "C3",
              EventKind.OFFLOAD: "C1", EventKind.PREFETCH: "C4"}
    for row, stream in enumerate((Stream.MEMORY, Stream.COMPUTE)):
        spans = [(e.start * 1e-9, (e.end - e.start) * 1e-9) for e in report.events
                 if e.stream is stream and e.end > e.start]
        kinds = [colors.get(e.kind, "0.5") for e in report.events if e.stream is stream and e.end > e.start]
        lanes.broken_barh(spans, (row + 0.1, 0.8), facecolors=kinds, linewidth=0)
    lanes.set_yticks([0.5, 1.5])
    lanes.set_yticklabels(["memory", "compute"])
    lanes.set_xlabel("time (s)")
    lanes.grid(False)
    fig.tight_layout()
    return _save(fig, path)


def plot_footprint(fp: FootprintReport, path: Path, title: str = "") -> Path:
    plt = _pyplot()
    parts = [("weights", fp.weights_bytes), ("feature maps", fp.feature_maps_bytes),
             ("gradient maps", fp.gradient_buffers_bytes), ("workspace", fp.workspace_bytes)]
    if fp.weight_gradients_bytes:
        parts.append(("weight gradients", fp.weight_gradients_bytes))
    fig, ax = plt.subplots(figsize=(5.5, 3.0))
    left = 0.0
    for i, (name, v) in enumerate(parts):
        ax.barh([0], [v / GIB], left=left, color=f"C{i}", label=name)
        left += v / GIB
    ax.set_yticks([])
    ax.set_xlabel("GiB")
    ax.set_title(title or f"total {fp.total_bytes / GIB:.2f} GiB", fontsize=9)
    ax.legend(fontsize=7, frameon=False, ncol=3, loc="upper center", bbox_to_anchor=(0.5, -0.3))
    fig.tight_layout()
    return _save(fig, path)


def plot_sweep(rows: Sequence[dict], axis: str, path: Path, capacity: int | None = None) -> Path:
    plt = _pyplot()
    xs = [str(r[axis]) for r in rows]
    fig, ax = plt.subplots(figsize=(6.5, 3.4))
    pos = range(len(rows))
    width = 0.4
    mx = [(r.get("max_mem_bytes") or 0) / GIB for r in rows]
    av = [(r.get("avg_mem_bytes") or 0) / GIB for r in rows]
    ax.bar([p - width / 2 for p in pos], mx, width, label="max", color="C0")
    ax.bar([p + width / 2 for p in pos], av, width, label="average", color="C9")
    for p, r in zip(pos, rows):
        if r.get("verdict") != "PASS":
            ax.annotate("x", (p, max(mx[p], av[p])), ha="center", va="bottom", color="C3", fontsize=10)
    if capacity is not None:
        ax.axhline(capacity / GIB, color="k", lw=0.8, ls=":", label="capacity")
    ax.set_xticks(list(pos))
    ax.set_xticklabels(xs, rotation=30 if len(xs) > 6 else 0, fontsize=7)
    ax.set_xlabel(axis)
    ax.set_ylabel("device memory (GiB)")
    ax.legend(fontsize=7, frameon=False)
    fig.tight_layout()
    return _save(fig, path)


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path)
    _pyplot().close(fig)
    return path
