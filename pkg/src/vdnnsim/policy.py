"""Transfer policies: static baseline/offload-all/offload-conv decisions, the
bounded prefetch search, greedy algorithm downgrade and the dynamic
profiling-pass selector."""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, field, replace
from typing import Mapping

from .costmodel import ConvAlgo, CostModel
from .memmodel import TensorPlan, tensor_plan
from .netgraph import LayerKind, NetworkGraph
from .simcore import OFFLOADABLE, RunReport, SimState, simulate


class PolicyKind(str, enum.Enum):
    BASELINE = "BASELINE"
    VDNN_ALL = "VDNN_ALL"
    VDNN_CONV = "VDNN_CONV"


class AlgoMode(str, enum.Enum):
    MEMORY_OPTIMAL = "MEMORY_OPTIMAL"
    PERF_OPTIMAL = "PERF_OPTIMAL"


TWO_BUFFER_REUSE = "TWO_BUFFER_REUSE"
PER_LAYER = "PER_LAYER"


class Untrainable(RuntimeError):
    def __init__(self, passes: list["ProfilePassResult"]):
        self.passes = passes
        first = passes[0] if passes else None
        super().__init__(f"network does not fit even with {first.label if first else 'any policy'}")


@dataclass(frozen=True)
class PolicyDecision:
    offload: tuple[bool, ...]
    algo: Mapping[int, ConvAlgo]
    gradient_scheme: str = PER_LAYER
    label: str = ""

    def __post_init__(self):
        object.__setattr__(self, "offload", tuple(bool(f) for f in self.offload))
        object.__setattr__(self, "algo", {int(k): ConvAlgo(v) for k, v in dict(self.algo).items()})
        if self.gradient_scheme not in (TWO_BUFFER_REUSE, PER_LAYER):
            raise ValueError(f"unknown gradient scheme {self.gradient_scheme!r}")

    def offloaded_layers(self) -> list[int]:
        return [i for i, f in enumerate(self.offload) if f]

    def to_dict(self) -> dict:
        return {
            "label": self.label,
            "gradient_scheme": self.gradient_scheme,
            "offload": [i for i, f in enumerate(self.offload) if f],
            "num_layers": len(self.offload),
            "algo": {str(k): v.value for k, v in sorted(self.algo.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "PolicyDecision":
        flags = [False] * int(doc["num_layers"])
        for i in doc["offload"]:
            flags[int(i)] = True
        return cls(tuple(flags), {int(k): ConvAlgo(v) for k, v in doc["algo"].items()},
                   doc.get("gradient_scheme", PER_LAYER), doc.get("label", ""))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_json(cls, text: str) -> "PolicyDecision":
        return cls.from_dict(json.loads(text))


def algos_for(graph: NetworkGraph, mode: AlgoMode | str, cost: CostModel | None = None) -> dict[int, ConvAlgo]:
    cost = cost or CostModel()
    if AlgoMode(mode) is AlgoMode.MEMORY_OPTIMAL:
        return {lid: ConvAlgo.IMPLICIT_GEMM for lid in graph.conv_ids()}
    return {lid: cost.fastest_algo(graph, lid) for lid in graph.conv_ids()}


def offload_flags(graph: NetworkGraph, kind: PolicyKind | str) -> tuple[bool, ...]:
    kind = PolicyKind(kind)
    if kind is PolicyKind.VDNN_ALL:
        return tuple(l.kind in OFFLOADABLE for l in graph.layers)
    if kind is PolicyKind.VDNN_CONV:
        return tuple(l.kind is LayerKind.CONV for l in graph.layers)
    return (False,) * len(graph)


def static_decision(kind: PolicyKind | str, algo_mode: AlgoMode | str, graph: NetworkGraph,
                    cost: CostModel | None = None) -> PolicyDecision:
    kind, algo_mode = PolicyKind(kind), AlgoMode(algo_mode)
    scheme = TWO_BUFFER_REUSE if kind is PolicyKind.BASELINE else PER_LAYER
    tag = "m" if algo_mode is AlgoMode.MEMORY_OPTIMAL else "p"
    return PolicyDecision(offload_flags(graph, kind), algos_for(graph, algo_mode, cost), scheme,
                          f"{kind.value.lower()}({tag})")


def find_prefetch_layer(current: int, state: SimState, graph: NetworkGraph) -> int | None:
    """Closest lower layer with an offloaded, not yet prefetched input. The
    search stops after the first CONV layer below ``current`` (that layer is
    still a candidate)."""
    for lid in range(current - 1, -1, -1):
        if lid in state.offloaded_by and lid not in state.prefetch_enqueued:
            state.prefetch_enqueued.add(lid)
            return lid
        if graph[lid].kind is LayerKind.CONV:
            return None
    return None


@dataclass(frozen=True)
class ProfilePassResult:
    phase: str
    decision: PolicyDecision
    verdict: str
    total_seconds: float
    max_mem_bytes: int

    @property
    def label(self) -> str:
        return self.decision.label

    @property
    def passed(self) -> bool:
        return self.verdict == "PASS"

    @classmethod
    def from_report(cls, phase: str, decision: PolicyDecision, report: RunReport) -> "ProfilePassResult":
        return cls(phase, decision, str(report.verdict), report.total_seconds, report.max_mem_bytes)


def greedy_downgrade(graph: NetworkGraph, capacity: int | None, offload_kind: PolicyKind | str,
                     cost: CostModel | None = None, plan: TensorPlan | None = None,
                     probes: list | None = None) -> PolicyDecision | None:
    """Start every CONV layer at its fastest algorithm and walk layers in
    forward order, stepping a layer down its algorithm ladder while the pass
    with that layer's choice (later layers held at IMPLICIT_GEMM) overflows.
    Returns None when even the final configuration does not fit."""
    cost = cost or CostModel()
    plan = plan or tensor_plan(graph, cost.elem_size)
    kind = PolicyKind(offload_kind)
    flags = offload_flags(graph, kind)
    label = f"greedy-{kind.value.lower()}"
    algos = algos_for(graph, AlgoMode.PERF_OPTIMAL, cost)

    def run(choice: dict[int, ConvAlgo]) -> RunReport:
        rep = simulate(graph, PolicyDecision(flags, choice, PER_LAYER, label), cost, capacity, plan=plan)
        if probes is not None:
            probes.append(rep)
        return rep

    if run(algos).passed:
        return PolicyDecision(flags, algos, PER_LAYER, label)
    convs = graph.conv_ids()
    for i, lid in enumerate(convs):
        ladder = cost.algo_ladder(graph, lid)
        step = ladder.index(algos[lid])
        floor = {later: ConvAlgo.IMPLICIT_GEMM for later in convs[i + 1:]}
        while algos[lid] is not ConvAlgo.IMPLICIT_GEMM:
            if run({**algos, **floor}).passed:
                break
            step += 1
            algos[lid] = ladder[step]
    decision = PolicyDecision(flags, dict(algos), PER_LAYER, label)
    final = simulate(graph, decision, cost, capacity, plan=plan)
    return decision if final.passed else None


def dynamic_select(graph: NetworkGraph, capacity: int | None, cost: CostModel | None = None
                   ) -> tuple[PolicyDecision, list[ProfilePassResult]]:
    """Profiling passes in order: offload-all with memory-optimal algorithms
    (trainability floor), then fastest algorithms with no/conv/all
    offloading, then greedy downgrade under offload-conv and offload-all,
    falling back to the first pass."""
    cost = cost or CostModel()
    plan = tensor_plan(graph, cost.elem_size)
    passes: list[ProfilePassResult] = []

    def attempt(phase: str, decision: PolicyDecision) -> bool:
        rep = simulate(graph, decision, cost, capacity, plan=plan)
        passes.append(ProfilePassResult.from_report(phase, decision, rep))
        return rep.passed

    def labeled(d: PolicyDecision) -> PolicyDecision:
        return replace(d, label=f"dyn:{d.label}")

    floor = labeled(static_decision(PolicyKind.VDNN_ALL, AlgoMode.MEMORY_OPTIMAL, graph, cost))
    if not attempt("P1", floor):
        raise Untrainable(passes)
    for kind in (PolicyKind.BASELINE, PolicyKind.VDNN_CONV, PolicyKind.VDNN_ALL):
        d = labeled(static_decision(kind, AlgoMode.PERF_OPTIMAL, graph, cost))
        if attempt("P2", d):
            return d, passes
    for kind in (PolicyKind.VDNN_CONV, PolicyKind.VDNN_ALL):
        d = greedy_downgrade(graph, capacity, kind, cost, plan)
        if d is not None:
            d = labeled(d)
            attempt("P3", d)
            return d, passes
        passes.append(ProfilePassResult("P3", labeled(PolicyDecision(offload_flags(graph, kind), {}, PER_LAYER,
                                                                       f"greedy-{kind.value.lower()}")),
                                        "OOM", 0.0, 0))
    return floor, passes
