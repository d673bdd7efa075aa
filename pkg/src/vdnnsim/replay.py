"""Independent validator for simulator event logs.

Re-walks a RunReport's events with brute-force bookkeeping and lists every
broken rule. Nothing here shares code with the simulator beyond the tensor
plan (which only says what each layer reads)."""

from __future__ import annotations

from collections import defaultdict
from typing import TYPE_CHECKING

from .memmodel import TensorPlan, tensor_plan
from .netgraph import LayerKind, NetworkGraph
from .simcore import EventKind, RunReport, Stream

if TYPE_CHECKING:
    from .policy import PolicyDecision

_DURATION_KINDS = {
    Stream.COMPUTE: (EventKind.FWD, EventKind.BWD, EventKind.SYNC),
    Stream.MEMORY: (EventKind.OFFLOAD, EventKind.PREFETCH),
}


def _live_intervals(events) -> dict[str, list[list]]:
    """tag -> list of [alloc_time, release_time, alloc_index]."""
    spans: dict[str, list[list]] = defaultdict(list)
    for i, e in enumerate(events):
        if e.kind is EventKind.ALLOC:
            spans[e.tensor].append([e.start, None, i])
        elif e.kind is EventKind.RELEASE:
            if spans[e.tensor] and spans[e.tensor][-1][1] is None:
                spans[e.tensor][-1][1] = e.start
    return spans


def _covered(spans: dict[str, list[list]], tag: str, start: int, end: int, horizon: int) -> bool:
    for t0, t1, _ in spans.get(tag, ()):
        if t0 <= start and (horizon if t1 is None else t1) >= end:
            return True
    return False


def replay_check(report: RunReport, graph: NetworkGraph, decision: "PolicyDecision",
                 capacity: int | None, plan: TensorPlan | None = None, elem_size: int = 4) -> list[str]:
    plan = plan or tensor_plan(graph, elem_size)
    ev = report.events
    out: list[str] = []
    horizon = max((e.end for e in ev), default=0)

    # interval sanity and in-order queues
    for e in ev:
        if e.end < e.start:
            out.append(f"{e.kind.value}({e.layer}) ends before it starts")
    for stream, kinds in _DURATION_KINDS.items():
        spans = sorted((e.start, e.end, e.kind.value, e.layer) for e in ev if e.stream is stream and e.kind in kinds)
        for (s0, e0, k0, l0), (s1, e1, k1, l1) in zip(spans, spans[1:]):
            if s1 < e0:
                out.append(f"{stream.value} queue overlap: {k0}({l0}) [{s0},{e0}) and {k1}({l1}) [{s1},{e1})")

    fwd = {e.layer: e for e in ev if e.kind is EventKind.FWD}
    bwd = {e.layer: e for e in ev if e.kind is EventKind.BWD}
    offloads = [e for e in ev if e.kind is EventKind.OFFLOAD]
    prefetches = [e for e in ev if e.kind is EventKind.PREFETCH]

    for o in offloads:
        f = fwd.get(o.layer)
        if f is None or o.start < f.start:
            out.append(f"OFFLOAD by layer {o.layer} starts before its FWD")
        if not decision.offload[o.layer]:
            out.append(f"layer {o.layer} offloaded {o.tensor} without being flagged")

    # pool replay: disjointness, bounds, capacity, high-water, release of live blocks
    cap = capacity
    live: dict[str, tuple[int, int]] = {}
    current = high = 0
    timeline: list[tuple[int, int]] = [(0, 0)]
    for e in ev:
        if e.kind is EventKind.ALLOC:
            if e.tensor in live:
                out.append(f"{e.tensor} allocated twice without release")
            lo, hi = e.offset, e.offset + e.bytes
            if lo < 0 or (cap is not None and hi > cap):
                out.append(f"{e.tensor} extent [{lo},{hi}) outside the pool")
            for tag, (a, b) in live.items():
                if lo < b and a < hi:
                    out.append(f"pool overlap: {e.tensor} [{lo},{hi}) with {tag} [{a},{b})")
            live[e.tensor] = (lo, hi)
            current += e.bytes
            high = max(high, current)
            timeline.append((e.start, current))
            if cap is not None and current > cap:
                out.append(f"capacity exceeded at t={e.start}: {current} > {cap}")
        elif e.kind is EventKind.RELEASE:
            if e.tensor not in live:
                out.append(f"release of {e.tensor} which is not live")
                continue
            lo, hi = live.pop(e.tensor)
            current -= hi - lo
            timeline.append((e.start, current))
    if current != 0:
        out.append(f"{current} bytes still allocated after the run")
    if high != report.max_mem_bytes:
        out.append(f"max_mem {report.max_mem_bytes} differs from replayed high-water {high}")
    if report.passed and cap is not None and report.max_mem_bytes > cap:
        out.append("PASS verdict with max_mem above capacity")

    # time-weighted average
    T = report.total_ns
    if T > 0:
        acc = 0
        for (t0, c), (t1, _) in zip(timeline, timeline[1:] + [(max(T, timeline[-1][0]), 0)]):
            acc += c * max(0, min(t1, T) - min(t0, T))
        avg = acc / T
        if abs(avg - report.avg_mem_bytes) > 1e-6 * max(1.0, avg):
            out.append(f"avg_mem {report.avg_mem_bytes} differs from replayed integral {avg}")

    # residency: everything a compute event touches is allocated over its duration
    spans = _live_intervals(ev)
    for lid, e in fwd.items():
        kind = graph[lid].kind
        touched = list(plan.in_bufs[lid])
        if kind is not LayerKind.LOSS:
            touched.append(plan.buf[lid])
        for b in touched:
            if b in plan.counted and not _covered(spans, f"Y{b}", e.start, e.end, horizon):
                out.append(f"FWD({lid}) uses Y{b} while it is not resident")
    arrival = {p.tensor: p.end for p in prefetches}
    for lid, e in bwd.items():
        for b in plan.bwd_needs[lid]:
            tag = f"Y{b}"
            if not _covered(spans, tag, e.start, e.end, horizon):
                out.append(f"BWD({lid}) uses {tag} while it is not resident")
            if tag in arrival and arrival[tag] > e.start:
                out.append(f"BWD({lid}) starts before the prefetch of {tag} completes")
        if decision.gradient_scheme == "PER_LAYER" and graph[lid].kind is not LayerKind.ACTV:
            for b in plan.in_bufs[lid]:
                if b in plan.counted and not _covered(spans, f"dY{b}", e.start, e.end, horizon):
                    out.append(f"BWD({lid}) writes dY{b} while it is not allocated")

    # offload-before-release and prefetch conservation
    offloaded = defaultdict(int)
    for o in offloads:
        offloaded[o.tensor] += 1
        rel = [e for e in ev if e.kind is EventKind.RELEASE and e.tensor == o.tensor and e.phase == "FWD"]
        for r in rel:
            if r.start < o.end:
                out.append(f"{o.tensor} released at {r.start} before its offload ends at {o.end}")
    fetched = defaultdict(int)
    for p in prefetches:
        fetched[p.tensor] += 1
        if p.tensor not in offloaded:
            out.append(f"{p.tensor} prefetched without having been offloaded")
    for tag, n in offloaded.items():
        if n > 1:
            out.append(f"{tag} offloaded {n} times")
        if fetched[tag] > 1:
            out.append(f"{tag} prefetched {fetched[tag]} times")
        if report.passed and fetched[tag] == 0:
            out.append(f"{tag} offloaded but never prefetched")

    # forward release only after the last forward reader
    remaining = dict(plan.fwd_readers)
    for e in ev:
        if e.kind is EventKind.FWD:
            for b in plan.in_bufs[e.layer]:
                remaining[b] -= 1
                if remaining[b] < 0:
                    out.append(f"negative consumer count for buffer {b}")
        elif e.kind is EventKind.RELEASE and e.phase == "FWD" and e.tensor.startswith("Y"):
            b = int(e.tensor[1:])
            if remaining.get(b, 0) > 0:
                out.append(f"{e.tensor} released in forward with {remaining[b]} readers left")
            readers = [fwd[c].end for c in fwd if b in plan.in_bufs[c]]
            if readers and e.start < max(readers):
                out.append(f"{e.tensor} released before its last reader finishes")

    # forward sync rule
    order = [l.id for l in graph.layers if l.id in fwd]
    off_end = defaultdict(int)
    for o in offloads:
        off_end[o.layer] = max(off_end[o.layer], o.end)
    for a, b in zip(order, order[1:]):
        expect = max(fwd[a].end, off_end.get(a, 0))
        if fwd[b].start != expect:
            out.append(f"FWD({b}) starts at {fwd[b].start}, sync rule gives {expect}")

    # report sums
    if report.offload_traffic_bytes != sum(o.bytes for o in offloads):
        out.append("offload traffic differs from the sum of OFFLOAD bytes")
    if report.prefetch_traffic_bytes != sum(p.bytes for p in prefetches):
        out.append("prefetch traffic differs from the sum of PREFETCH bytes")
    stall = sum(e.end - e.start for e in ev if e.kind is EventKind.SYNC)
    if report.stall_ns != stall or report.stall_ns < 0:
        out.append(f"stall {report.stall_ns} differs from summed SYNC time {stall}")
    return list(dict.fromkeys(out))
