"""Randomized invariant campaign: small random graphs (with forks and joins),
random capacities, every policy, each run checked by the replay validator
and the pool's structural invariants."""

from __future__ import annotations

import random
import time
from dataclasses import dataclass, field

from .costmodel import CostModel
from .memmodel import tensor_plan
from .netgraph import GraphError, LayerBuilder, LayerKind, NetworkGraph
from .policy import PolicyDecision, Untrainable, dynamic_select, static_decision
from .replay import replay_check
from .simcore import OFFLOADABLE, simulate

MAX_LAYERS = 12


def random_graph(rng: random.Random, max_layers: int = MAX_LAYERS) -> NetworkGraph:
    """A random valid training graph of at most ``max_layers`` layers ending in
    a single LOSS. Forks come from consuming one output several times, joins
    from multi-input layers; in-place ACTV is only applied to outputs nothing
    else reads."""
    while True:
        try:
            return _try_graph(rng, max_layers)
        except GraphError:
            continue


def _try_graph(rng: random.Random, max_layers: int) -> NetworkGraph:
    b = LayerBuilder()
    side = rng.choice((4, 6, 8, 12, 16))
    b.input(rng.randint(1, 4), rng.randint(1, 6), side, side)
    uses = [0]
    kinds = [LayerKind.INPUT]
    n_body = rng.randint(1, max_layers - 3)
    for _ in range(n_body):
        open_ids = [i for i, u in enumerate(uses) if u >= 0]
        roll = rng.random()
        last = len(uses) - 1
        src = last if rng.random() < 0.6 else rng.choice(open_ids)
        if roll < 0.25 and uses[src] == 0 and kinds[src] is not LayerKind.INPUT:
            b.actv(inputs=(src,))
            uses[src] = -1  # consumed in place; nobody else may read it
        elif roll < 0.7:
            inputs = _pick_inputs(rng, uses, src)
            k = rng.choice((1, 3))
            stride = rng.choice((1, 1, 2))
            if stride == 2:
                k, pad = 2, 0
            else:
                pad = k // 2
            b.conv(rng.randint(1, 8), k, stride, pad, inputs=inputs)
        elif roll < 0.85:
            inputs = _pick_inputs(rng, uses, src)
            b.pool(2, 2, inputs=inputs)
        else:
            inputs = _pick_inputs(rng, uses, src)
            b.fc(rng.randint(2, 16), inputs=inputs)
        for i in b.layers[-1].inputs:
            if uses[i] >= 0:
                uses[i] += 1
        uses.append(0)
        kinds.append(b.layers[-1].kind)
    dangling = [i for i, u in enumerate(uses) if u == 0]
    if len(dangling) > 1 or kinds[dangling[0]] is LayerKind.INPUT:
        b.fc(rng.randint(2, 10), inputs=tuple(dangling))
    b.loss()
    return b.build(name=f"fuzz{rng.getrandbits(24):06x}")


def _pick_inputs(rng: random.Random, uses: list[int], src: int) -> tuple[int, ...]:
    if uses[src] < 0:
        src = len(uses) - 1
        if uses[src] < 0:
            raise GraphError("no readable output")
    if rng.random() < 0.25:
        others = [i for i, u in enumerate(uses) if u >= 0 and i != src]
        if others:
            return tuple(sorted({src, rng.choice(others)}))
    return (src,)


def random_decision(rng: random.Random, graph: NetworkGraph, cost: CostModel) -> PolicyDecision:
    flags = tuple(l.kind in OFFLOADABLE and rng.random() < 0.5 for l in graph.layers)
    algos = {lid: rng.choice(cost.algo_ladder(graph, lid)) for lid in graph.conv_ids()}
    return PolicyDecision(flags, algos, rng.choice(("PER_LAYER", "TWO_BUFFER_REUSE")), "random")


@dataclass
class FuzzResult:
    seed: int
    trials: int
    runs: int = 0
    untrainable: int = 0
    passed_runs: int = 0
    violations: list[tuple[int, str, str]] = field(default_factory=list)
    pool_violations: list[tuple[int, str, str]] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def ok(self) -> bool:
        return not self.violations and not self.pool_violations

    def summary(self) -> dict:
        return {
            "seed": self.seed, "trials": self.trials, "runs": self.runs, "passed_runs": self.passed_runs,
            "untrainable": self.untrainable, "replay_violations": len(self.violations),
            "pool_violations": len(self.pool_violations), "seconds": round(self.seconds, 3),
        }


def run_campaign(seed: int = 0, trials: int = 10_000, cost: CostModel | None = None) -> FuzzResult:
    cost = cost or CostModel()
    rng = random.Random(seed)
    res = FuzzResult(seed, trials)
    t0 = time.perf_counter()
    for trial in range(trials):
        graph = random_graph(rng)
        plan = tensor_plan(graph, cost.elem_size)
        lo = simulate(graph, static_decision("VDNN_ALL", "MEMORY_OPTIMAL", graph, cost), cost, None, plan=plan)
        hi = simulate(graph, static_decision("BASELINE", "PERF_OPTIMAL", graph, cost), cost, None, plan=plan)
        roll = rng.random()
        if roll < 0.05:
            capacity = None
        else:
            capacity = rng.randint(max(512, lo.max_mem_bytes // 2), max(1024, hi.max_mem_bytes * 6 // 5))
        decisions = [static_decision(k, m, graph, cost) for k, m in
                     (("BASELINE", "PERF_OPTIMAL"), ("VDNN_ALL", "MEMORY_OPTIMAL"), ("VDNN_CONV", "PERF_OPTIMAL"))]
        try:
            dyn, _ = dynamic_select(graph, capacity, cost)
            decisions.append(dyn)
        except Untrainable:
            res.untrainable += 1
        decisions.append(random_decision(rng, graph, cost))
        for d in decisions:
            rep = simulate(graph, d, cost, capacity, check_pool=True, plan=plan)
            res.runs += 1
            res.passed_runs += rep.passed
            for msg in replay_check(rep, graph, d, capacity, plan):
                res.violations.append((trial, d.label, msg))
            for msg in rep.pool_violations:
                res.pool_violations.append((trial, d.label, msg))
            if d.label.startswith("dyn") and not rep.passed:
                res.violations.append((trial, d.label, "dynamic decision does not pass"))
    res.seconds = time.perf_counter() - t0
    return res
