"""Randomised properties over the pool, the simulator and the policies."""

import random

from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from oracles import CellPool
from vdnnsim.costmodel import CostModel
from vdnnsim.fuzz import random_decision, random_graph
from vdnnsim.memmodel import ALIGNMENT, MemoryPool, PoolOOM
from vdnnsim.policy import Untrainable, dynamic_select, static_decision
from vdnnsim.replay import replay_check
from vdnnsim.simcore import simulate

CM = CostModel()
FAST = settings(max_examples=60, deadline=None, derandomize=True,
                suppress_health_check=[HealthCheck.too_slow])

ops = st.lists(st.tuples(st.booleans(), st.integers(1, 20 * ALIGNMENT), st.integers(0, 10**6)), max_size=120)


@FAST
@given(cells=st.integers(0, 64), ops=ops)
def test_pool_agrees_with_cell_array(cells, ops):
    cap = cells * ALIGNMENT
    pool, ref = MemoryPool(cap), CellPool(cap)
    live = []
    for is_free, n, pick in ops:
        if is_free and live:
            a, b = live.pop(pick % len(live))
            pool.free(a)
            ref.free(b)
            continue
        expect = ref.alloc(n)
        try:
            aid = pool.alloc(n)
        except PoolOOM:
            assert expect is None
            continue
        assert pool.live[aid].offset == expect
        live.append((aid, ref.next_id - 1))
    assert pool.check_invariants() == []
    assert pool.current_bytes == ref.used and pool.high_water_bytes == ref.high
    assert pool.free_extents == [(s * ALIGNMENT, l * ALIGNMENT) for s, l in ref.holes()]


@FAST
@given(seed=st.integers(0, 2**32 - 1), cap_kib=st.one_of(st.none(), st.integers(0, 64 * 1024)))
def test_random_runs_replay_clean(seed, cap_kib):
    rng = random.Random(seed)
    g = random_graph(rng)
    d = random_decision(rng, g, CM)
    cap = None if cap_kib is None else cap_kib * 1024
    rep = simulate(g, d, CM, cap)
    assert replay_check(rep, g, d, cap) == []
    assert rep.avg_mem_bytes <= rep.max_mem_bytes
    if rep.passed:
        assert cap is None or rep.max_mem_bytes <= cap
        assert rep.total_ns >= simulate(g, static_decision("BASELINE", "PERF_OPTIMAL", g, CM), CM, None).total_ns


@FAST
@given(seed=st.integers(0, 2**32 - 1))
def test_offload_traffic_accounting(seed):
    g = random_graph(random.Random(seed))
    base = simulate(g, static_decision("BASELINE", "MEMORY_OPTIMAL", g, CM), CM, None)
    assert base.offload_traffic_bytes == base.prefetch_traffic_bytes == base.host_peak_bytes == 0
    traffic = []
    for kind in ("VDNN_CONV", "VDNN_ALL"):
        rep = simulate(g, static_decision(kind, "MEMORY_OPTIMAL", g, CM), CM, None)
        assert rep.passed and rep.stall_ns >= 0
        assert rep.host_peak_bytes <= rep.offload_traffic_bytes
        assert rep.prefetch_traffic_bytes <= rep.offload_traffic_bytes
        traffic.append(rep.offload_traffic_bytes)
    assert traffic[0] <= traffic[1]


def _trainable(g, cap):
    try:
        d, _ = dynamic_select(g, cap, CM)
    except Untrainable:
        return False
    assert simulate(g, d, CM, cap).passed
    return True


@settings(max_examples=25, deadline=None, derandomize=True)
@given(seed=st.integers(0, 2**32 - 1))
def test_trainability_is_monotone_in_capacity(seed):
    g = random_graph(random.Random(seed))
    floor = simulate(g, static_decision("VDNN_ALL", "MEMORY_OPTIMAL", g, CM), CM, None).max_mem_bytes
    caps = sorted({0, floor // 2, floor - ALIGNMENT, floor, floor + ALIGNMENT, 2 * floor, 8 * floor})
    seen = [_trainable(g, c) for c in caps if c >= 0]
    assert seen == sorted(seen) and seen[-1]
