"""Two-queue discrete-event simulation of one training iteration.

Compute events (FWD/BWD/SYNC) run on the COMPUTE queue; transfers
(OFFLOAD/PREFETCH) and the instantaneous ALLOC/RELEASE bookkeeping run on
the MEMORY queue. Time is kept in integer nanoseconds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Callable

from .costmodel import CostModel, Direction
from .memmodel import HostLedger, MemoryPool, PoolOOM, TensorPlan, plan_placement, tensor_plan, weight_bytes
from .netgraph import InvalidGraph, LayerKind, NetworkGraph

if TYPE_CHECKING:
    from .policy import PolicyDecision

OFFLOADABLE = frozenset({LayerKind.INPUT, LayerKind.CONV, LayerKind.POOL})


class InvalidDecision(ValueError):
    pass


class Stream(str, enum.Enum):
    COMPUTE = "COMPUTE"
    MEMORY = "MEMORY"


class EventKind(str, enum.Enum):
    FWD = "FWD"
    BWD = "BWD"
    OFFLOAD = "OFFLOAD"
    PREFETCH = "PREFETCH"
    ALLOC = "ALLOC"
    RELEASE = "RELEASE"
    SYNC = "SYNC"


class Residency(str, enum.Enum):
    DEVICE = "DEVICE"
    OFFLOADED = "OFFLOADED"
    PREFETCHING = "PREFETCHING"
    RELEASED = "RELEASED"


@dataclass(slots=True)
class StreamEvent:
    stream: Stream
    kind: EventKind
    layer: int
    start: int
    end: int
    bytes: int = 0
    tensor: str = ""
    offset: int = -1
    phase: str = ""

    def as_row(self) -> list:
        return [self.stream.value, self.kind.value, self.layer, self.start, self.end, self.bytes,
                self.tensor, self.offset, self.phase]


EVENT_COLUMNS = ["stream", "kind", "layer", "start_ns", "end_ns", "bytes", "tensor", "offset", "phase"]


@dataclass(frozen=True)
class Verdict:
    status: str
    layer: int | None = None
    phase: str | None = None
    fragmented: bool = False

    @property
    def passed(self) -> bool:
        return self.status == "PASS"

    def __str__(self) -> str:
        if self.passed:
            return "PASS"
        frag = ", fragmented" if self.fragmented else ""
        return f"OOM(layer={self.layer}, phase={self.phase}{frag})"


PASS = Verdict("PASS")


@dataclass
class SimState:
    """Mutable per-run bookkeeping; also what the prefetch finder inspects."""

    residency: dict[int, Residency] = field(default_factory=dict)
    remaining: dict[int, int] = field(default_factory=dict)
    offloaded_by: dict[int, tuple[int, ...]] = field(default_factory=dict)
    prefetch_enqueued: set[int] = field(default_factory=set)
    ready_at: dict[int, int] = field(default_factory=dict)
    host: HostLedger = field(default_factory=HostLedger)


@dataclass
class RunReport:
    events: list[StreamEvent]
    max_mem_bytes: int
    avg_mem_bytes: float
    offload_traffic_bytes: int
    prefetch_traffic_bytes: int
    stall_ns: int
    total_ns: int
    verdict: Verdict
    host_peak_bytes: int
    capacity: int | None
    label: str = ""
    gradient_scheme: str = ""
    fwd_stall_ns: dict[int, int] = field(default_factory=dict)
    mem_timeline: list[tuple[int, int]] = field(default_factory=list)
    host_timeline: list[tuple[int, int]] = field(default_factory=list)
    pool_trace: list[tuple] | None = None
    pool_violations: list[str] = field(default_factory=list)
    placement: str = "best-fit"

    @property
    def passed(self) -> bool:
        return self.verdict.passed

    @property
    def total_seconds(self) -> float:
        return self.total_ns * 1e-9

    @property
    def stall_seconds(self) -> float:
        return self.stall_ns * 1e-9

    @property
    def host_fraction(self) -> float:
        """Share of the run's peak footprint held in host memory."""
        denom = self.host_peak_bytes + self.max_mem_bytes
        return self.host_peak_bytes / denom if denom else 0.0

    def summary(self) -> dict:
        return {
            "label": self.label,
            "verdict": str(self.verdict),
            "passed": self.passed,
            "capacity_bytes": self.capacity,
            "max_mem_bytes": self.max_mem_bytes,
            "avg_mem_bytes": self.avg_mem_bytes,
            "offload_traffic_bytes": self.offload_traffic_bytes,
            "prefetch_traffic_bytes": self.prefetch_traffic_bytes,
            "host_peak_bytes": self.host_peak_bytes,
            "host_fraction": self.host_fraction,
            "stall_ns": self.stall_ns,
            "total_ns": self.total_ns,
            "stall_seconds": self.stall_seconds,
            "total_seconds": self.total_seconds,
            "gradient_scheme": self.gradient_scheme,
            "placement": self.placement,
        }


def to_ns(seconds: float) -> int:
    return int(round(seconds * 1e9))


def time_weighted_average(timeline: list[tuple[int, int]], total_ns: int, peak: int) -> float:
    if total_ns <= 0:
        return float(peak)
    acc = 0
    for (t0, cur), (t1, _) in zip(timeline, timeline[1:]):
        acc += cur * (min(t1, total_ns) - min(t0, total_ns))
    if timeline:
        t_last, cur = timeline[-1]
        acc += cur * max(0, total_ns - t_last)
    return acc / total_ns


class _OOM(Exception):
    def __init__(self, layer: int, phase: str, err: PoolOOM):
        self.layer, self.phase, self.err = layer, phase, err


def check_decision(graph: NetworkGraph, decision: "PolicyDecision") -> None:
    if len(decision.offload) != len(graph):
        raise InvalidDecision(f"decision covers {len(decision.offload)} layers, graph has {len(graph)}")
    convs = set(graph.conv_ids())
    if set(decision.algo) != convs:
        extra = sorted(set(decision.algo) - convs)
        missing = sorted(convs - set(decision.algo))
        raise InvalidDecision(f"algorithm map mismatch: unknown/non-CONV layers {extra}, missing CONV layers {missing}")


def _check_graph(graph: NetworkGraph) -> None:
    if graph.shapes is None:
        raise InvalidGraph("shapes must be inferred before simulation")
    sinks = [l.id for l in graph.layers if not graph.consumers[l.id]]
    if len(graph) < 2 or sinks != [len(graph) - 1] or graph[-1].kind is not LayerKind.LOSS:
        raise InvalidGraph("simulation needs a single LOSS layer as the last layer and only sink")


def simulate(graph: NetworkGraph, decision: "PolicyDecision", cost: CostModel | None = None,
             capacity: int | None = None, *, trace_pool: bool = False, check_pool: bool = False,
             plan: TensorPlan | None = None, prefetch_finder: Callable | None = None,
             replan: bool = True) -> RunReport:
    """Run one forward and backward pass under ``decision``.

    ``capacity=None`` means an unbounded pool (the oracle device). An
    allocation failure stops the run and is reported in the verdict.

    The pool places blocks by best fit. Event timing does not depend on
    where blocks land, so when best fit fails only because of fragmentation
    (enough free bytes, no single hole) and ``replan`` is set, the run's
    allocation sequence is re-placed offline (``plan_placement``) and the
    pass repeated with that layout.
    """
    cost = cost or CostModel()
    plan = plan or tensor_plan(graph, cost.elem_size)
    kw = dict(trace_pool=trace_pool, check_pool=check_pool, plan=plan, prefetch_finder=prefetch_finder)
    report = _run(graph, decision, cost, capacity, **kw)
    if report.passed or not report.verdict.fragmented or not replan:
        return report
    probe = _run(graph, decision, cost, None, **kw)
    ops: list[tuple[str, int]] = []
    open_tags: dict[str, int] = {}
    n = 0
    for e in probe.events:
        if e.kind is EventKind.ALLOC:
            ops.append(("alloc", e.bytes))
            open_tags[e.tensor] = n
            n += 1
        elif e.kind is EventKind.RELEASE:
            ops.append(("free", open_tags.pop(e.tensor)))
    script = plan_placement(ops, capacity)
    if script is None:
        return report
    report = _run(graph, decision, cost, capacity, script=script, **kw)
    report.placement = "replanned"
    return report


def _run(graph: NetworkGraph, decision: "PolicyDecision", cost: CostModel, capacity: int | None, *,
         trace_pool: bool, check_pool: bool, plan: TensorPlan, prefetch_finder: Callable | None,
         script: list[int] | None = None) -> RunReport:
    if prefetch_finder is None:
        from .policy import find_prefetch_layer as prefetch_finder
    _check_graph(graph)
    check_decision(graph, decision)
    layers = graph.layers
    kinds = [l.kind for l in layers]
    offload = [bool(f) and kinds[i] in OFFLOADABLE for i, f in enumerate(decision.offload)]
    per_layer = decision.gradient_scheme == "PER_LAYER"
    algo = decision.algo

    pool = MemoryPool(capacity, trace=trace_pool, script=script)
    state = SimState()
    host = state.host
    events: list[StreamEvent] = []
    timeline: list[tuple[int, int]] = [(0, 0)]
    host_timeline: list[tuple[int, int]] = [(0, 0)]
    violations: list[str] = []
    live: dict[str, int] = {}
    nbytes = plan.buffer_bytes
    counted = plan.counted
    COMPUTE, MEMORY = Stream.COMPUTE, Stream.MEMORY

    def alloc(tag: str, size: int, layer: int, phase: str, now: int) -> None:
        try:
            aid = pool.alloc(size, tag, now)
        except PoolOOM as err:
            raise _OOM(layer, phase, err) from None
        live[tag] = aid
        a = pool.live[aid]
        events.append(StreamEvent(MEMORY, EventKind.ALLOC, layer, now, now, a.length, tag, a.offset, phase))
        timeline.append((now, pool.current_bytes))
        if check_pool:
            violations.extend(pool.check_invariants())

    def release(tag: str, layer: int, phase: str, now: int) -> None:
        aid = live.pop(tag)
        a = pool.live[aid]
        pool.free(aid, now)
        events.append(StreamEvent(MEMORY, EventKind.RELEASE, layer, now, now, a.length, tag, a.offset, phase))
        timeline.append((now, pool.current_bytes))
        if check_pool:
            violations.extend(pool.check_invariants())

    def lat(lid: int, direction: Direction) -> int:
        return to_ns(cost.layer_latency(graph, lid, direction, algo.get(lid)))

    def ws_bytes(lid: int) -> int:
        return cost.conv_workspace(graph, lid, algo[lid]) if kinds[lid] is LayerKind.CONV else 0

    t_c = 0  # compute queue
    t_m = 0  # memory queue
    offload_traffic = prefetch_traffic = 0
    stall = 0
    fwd_stall: dict[int, int] = {}
    verdict = PASS
    state.remaining = dict(plan.fwd_readers)
    offloader: dict[int, int] = {}

    def _prefetch(b: int, now: int, lid: int) -> int:
        nonlocal t_m, prefetch_traffic
        alloc(f"Y{b}", nbytes[b], lid, "BWD", now)
        p_start = max(now, t_m)
        p_end = p_start + to_ns(cost.transfer_latency(nbytes[b]))
        events.append(StreamEvent(MEMORY, EventKind.PREFETCH, offloader[b], p_start, p_end, nbytes[b], f"Y{b}",
                                  phase="BWD"))
        t_m = p_end
        prefetch_traffic += nbytes[b]
        host.remove(b)
        host_timeline.append((p_end, host.current_bytes))
        state.residency[b] = Residency.PREFETCHING
        state.ready_at[b] = p_end
        return p_end

    try:
        for l in layers:
            if l.kind in (LayerKind.CONV, LayerKind.FC):
                alloc(f"W{l.id}", weight_bytes(graph, l.id, cost.elem_size), l.id, "FWD", 0)
        if not per_layer:
            ws_max = max((ws_bytes(lid) for lid in graph.conv_ids()), default=0)
            if ws_max:
                alloc("WS", ws_max, -1, "FWD", 0)
            grad_max = max(nbytes.values(), default=0)
            if grad_max:
                alloc("G0", grad_max, -1, "FWD", 0)
                alloc("G1", grad_max, -1, "FWD", 0)

        # ---- forward ----
        for l in layers:
            lid = l.id
            kind = l.kind
            out = plan.buf[lid]
            if kind is LayerKind.INPUT:
                if out in counted:
                    alloc(f"Y{out}", nbytes[out], lid, "FWD", t_c)
                    state.residency[out] = Residency.DEVICE
                events.append(StreamEvent(COMPUTE, EventKind.FWD, lid, t_c, t_c, phase="FWD"))
                continue
            start = t_c
            if kind not in (LayerKind.ACTV, LayerKind.LOSS) and out in counted:
                alloc(f"Y{out}", nbytes[out], lid, "FWD", start)
                state.residency[out] = Residency.DEVICE
            ws = ws_bytes(lid) if per_layer else 0
            if ws:
                alloc(f"WS{lid}", ws, lid, "FWD", start)
            end = start + lat(lid, Direction.FWD)
            events.append(StreamEvent(COMPUTE, EventKind.FWD, lid, start, end, phase="FWD"))

            done: list[int] = []
            for b in plan.in_bufs[lid]:
                state.remaining[b] -= 1
                if state.remaining[b] == 0:
                    done.append(b)
            sync = end
            moved: list[int] = []
            if offload[lid]:
                for b in done:
                    if b not in counted or state.residency.get(b) is not Residency.DEVICE:
                        continue
                    o_start = max(start, t_m)
                    o_end = o_start + to_ns(cost.transfer_latency(nbytes[b]))
                    events.append(StreamEvent(MEMORY, EventKind.OFFLOAD, lid, o_start, o_end, nbytes[b], f"Y{b}",
                                              phase="FWD"))
                    t_m = o_end
                    sync = max(sync, o_end)
                    offload_traffic += nbytes[b]
                    host.add(b, nbytes[b])
                    host_timeline.append((o_end, host.current_bytes))
                    state.residency[b] = Residency.OFFLOADED
                    offloader[b] = lid
                    moved.append(b)
            if moved:
                state.offloaded_by[lid] = tuple(moved)
            if sync > end:
                events.append(StreamEvent(COMPUTE, EventKind.SYNC, lid, end, sync, phase="FWD"))
                stall += sync - end
                fwd_stall[lid] = sync - end
            if ws:
                release(f"WS{lid}", lid, "FWD", end)
            for b in moved:
                release(f"Y{b}", lid, "FWD", sync)
            if per_layer:
                for b in done:
                    if b in counted and b not in plan.last_bwd_user and state.residency.get(b) is Residency.DEVICE:
                        release(f"Y{b}", lid, "FWD", end)
                        state.residency[b] = Residency.RELEASED
            t_c = sync

        # ---- backward ----
        grads: set[int] = set()
        for lid in reversed(range(len(layers))):
            kind = kinds[lid]
            if kind is LayerKind.INPUT:
                continue
            issue = t_c
            if per_layer and kind is not LayerKind.ACTV:
                for b in plan.in_bufs[lid]:
                    if b in counted and b not in grads:
                        alloc(f"dY{b}", nbytes[b], lid, "BWD", issue)
                        grads.add(b)
            ws = ws_bytes(lid) if per_layer else 0
            if ws:
                alloc(f"WS{lid}", ws, lid, "BWD", issue)

            ready = issue
            for b in plan.bwd_needs[lid]:
                res = state.residency.get(b)
                if res is Residency.OFFLOADED:
                    # never prefetched ahead of time: fetch on demand
                    ready = max(ready, _prefetch(b, issue, lid))
                elif res is Residency.PREFETCHING:
                    ready = max(ready, state.ready_at[b])

            launched = False
            p = prefetch_finder(lid, state, graph)
            if p is not None:
                for b in state.offloaded_by[p]:
                    if state.residency.get(b) is Residency.OFFLOADED:
                        _prefetch(b, issue, lid)
                        launched = True

            start = max(issue, ready)
            if start > issue:
                events.append(StreamEvent(COMPUTE, EventKind.SYNC, lid, issue, start, phase="BWD"))
                stall += start - issue
            end = start + lat(lid, Direction.BWD)
            events.append(StreamEvent(COMPUTE, EventKind.BWD, lid, start, end, phase="BWD"))
            sync = max(end, t_m) if launched else end
            if sync > end:
                events.append(StreamEvent(COMPUTE, EventKind.SYNC, lid, end, sync, phase="BWD"))
                stall += sync - end
            if per_layer:
                if ws:
                    release(f"WS{lid}", lid, "BWD", end)
                for b in sorted(grads):
                    if plan.grad_release_after[b] == lid:
                        release(f"dY{b}", lid, "BWD", end)
                        grads.discard(b)
                for b in plan.bwd_needs[lid]:
                    if plan.last_bwd_user[b] == lid:
                        release(f"Y{b}", lid, "BWD", end)
                        state.residency[b] = Residency.RELEASED
            t_c = sync
    except _OOM as oom:
        verdict = Verdict("OOM", oom.layer, oom.phase, oom.err.fragmented)

    total = t_c
    for tag in list(live):
        release(tag, -1, "END", max(total, _last_time(events)))
    max_mem = pool.high_water_bytes
    if violations:
        violations = list(dict.fromkeys(violations))
    return RunReport(
        events=events, max_mem_bytes=max_mem,
        avg_mem_bytes=time_weighted_average(timeline, total, max_mem),
        offload_traffic_bytes=offload_traffic, prefetch_traffic_bytes=prefetch_traffic,
        stall_ns=stall, total_ns=total, verdict=verdict, host_peak_bytes=host.peak_bytes,
        capacity=capacity, label=decision.label, gradient_scheme=decision.gradient_scheme,
        fwd_stall_ns=fwd_stall, mem_timeline=timeline, host_timeline=host_timeline,
        pool_trace=pool.trace, pool_violations=violations,
    )


def _last_time(events: list[StreamEvent]) -> int:
    return max((e.end for e in events), default=0)
