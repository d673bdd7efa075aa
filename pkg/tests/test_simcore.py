import pytest

from conftest import GiB, chain, preset
from vdnnsim.costmodel import LINKS, ConvAlgo, CostModel, LinkProfile
from vdnnsim.memmodel import baseline_footprint, tensor_plan
from vdnnsim.netgraph import InvalidGraph, LayerBuilder, LayerKind
from vdnnsim.policy import PolicyDecision, algos_for, static_decision
from vdnnsim.replay import replay_check
from vdnnsim.simcore import (EVENT_COLUMNS, EventKind, InvalidDecision, Stream, simulate, time_weighted_average,
                             to_ns)

POLICIES = [("BASELINE", "PERF_OPTIMAL"), ("BASELINE", "MEMORY_OPTIMAL"), ("VDNN_ALL", "MEMORY_OPTIMAL"),
            ("VDNN_ALL", "PERF_OPTIMAL"), ("VDNN_CONV", "PERF_OPTIMAL"), ("VDNN_CONV", "MEMORY_OPTIMAL")]


def by_kind(rep, kind):
    return {e.layer: e for e in rep.events if e.kind is kind}


def test_time_weighted_average():
    # 10 bytes for 2 ns, 30 bytes for 2 ns
    assert time_weighted_average([(0, 10), (2, 30)], 4, 30) == pytest.approx(20)
    assert time_weighted_average([(0, 0)], 0, 7) == 7


@pytest.mark.parametrize("name", ["alexnet", "vgg16", "inception_toy", "overfeat"])
@pytest.mark.parametrize("mode", ["PERF_OPTIMAL", "MEMORY_OPTIMAL"])
def test_baseline_high_water_equals_footprint(name, mode):
    g = preset(name, 4)
    cm = CostModel()
    rep = simulate(g, static_decision("BASELINE", mode, g, cm), cm, None)
    assert rep.passed and rep.stall_ns == 0
    assert rep.max_mem_bytes == baseline_footprint(g, algos_for(g, mode, cm), cm).total_bytes


@pytest.mark.parametrize("name", ["alexnet", "vgg16", "inception_toy"])
def test_oracle_time_is_sum_of_fastest_latencies(name):
    g = preset(name, 8)
    cm = CostModel()
    d = static_decision("BASELINE", "PERF_OPTIMAL", g, cm)
    rep = simulate(g, d, cm, None)
    total = sum(to_ns(cm.layer_latency(g, l.id, dr, d.algo.get(l.id))) for l in g.layers for dr in ("FWD", "BWD"))
    assert rep.total_ns == total


def _offload_chain(fwd, transfer_scale=1.0):
    """input -> conv1 -> conv2 -> conv3 -> fc -> loss with pinned latencies."""
    b = LayerBuilder()
    b.input(1, 64, 32, 32)
    b.conv(64, 3, 1, 1)
    b.conv(64, 3, 1, 1)
    b.conv(64, 3, 1, 1)
    b.fc(4)
    b.loss()
    g = b.build()
    over = {(lid, "FWD"): t for lid, t in fwd.items()}
    over.update({(lid, "BWD"): 1e-4 for lid in range(1, 5)})
    link = LinkProfile(effective_bw=12.8e9 * transfer_scale)
    return g, CostModel(link=link, latency_overrides=over)


def test_forward_sync_rule_by_hand():
    # each map is 64*32*32*4 = 256 KiB, ~20.5 us over the link
    g, cm = _offload_chain({1: 5e-6, 2: 50e-6, 3: 5e-6, 4: 1e-6})
    d = static_decision("VDNN_CONV", "MEMORY_OPTIMAL", g, cm)
    rep = simulate(g, d, cm, None)
    fwd, off = by_kind(rep, EventKind.FWD), by_kind(rep, EventKind.OFFLOAD)
    xfer = to_ns(cm.transfer_latency(64 * 32 * 32 * 4))
    # layer 1 offloads the input: transfer longer than compute, so FWD(2) waits
    assert off[1].start == fwd[1].start and off[1].end == fwd[1].start + xfer
    assert fwd[2].start == off[1].end
    assert rep.fwd_stall_ns[1] == xfer - to_ns(5e-6)
    # layer 2 computes longer than its transfer: no stall
    assert fwd[3].start == fwd[2].end and 2 not in rep.fwd_stall_ns
    assert fwd[4].start == max(fwd[3].end, off[3].end)
    assert replay_check(rep, g, d, None) == []


def test_stall_is_transfer_minus_compute():
    for compute in (1e-6, 10e-6, 30e-6, 100e-6):
        g, cm = _offload_chain({1: compute, 2: compute, 3: compute, 4: compute})
        rep = simulate(g, static_decision("VDNN_CONV", "MEMORY_OPTIMAL", g, cm), cm, None)
        xfer = to_ns(cm.transfer_latency(64 * 32 * 32 * 4))
        for lid in (1, 2, 3):
            assert rep.fwd_stall_ns.get(lid, 0) == max(0, xfer - to_ns(compute))


@pytest.mark.parametrize("name", ["vgg16", "alexnet", "inception_toy", "overfeat"])
@pytest.mark.parametrize("kind,mode", POLICIES)
@pytest.mark.parametrize("cap", [None, 12 * GiB, 3 * GiB])
def test_replay_clean_across_presets(name, kind, mode, cap):
    g = preset(name, 32)
    cm = CostModel()
    d = static_decision(kind, mode, g, cm)
    rep = simulate(g, d, cm, cap, check_pool=True)
    assert replay_check(rep, g, d, cap) == []
    assert rep.pool_violations == []
    assert rep.avg_mem_bytes <= rep.max_mem_bytes
    if rep.passed:
        assert rep.prefetch_traffic_bytes == rep.offload_traffic_bytes
        assert cap is None or rep.max_mem_bytes <= cap


def test_offload_reduces_memory_and_costs_time():
    g = preset("vgg16", 32)
    cm = CostModel()
    base = simulate(g, static_decision("BASELINE", "MEMORY_OPTIMAL", g, cm), cm, None)
    conv = simulate(g, static_decision("VDNN_CONV", "MEMORY_OPTIMAL", g, cm), cm, None)
    full = simulate(g, static_decision("VDNN_ALL", "MEMORY_OPTIMAL", g, cm), cm, None)
    # the peak sits in conv1's backward pass, which needs the same maps either way
    assert full.max_mem_bytes <= conv.max_mem_bytes < base.max_mem_bytes
    assert full.avg_mem_bytes < conv.avg_mem_bytes < base.avg_mem_bytes
    assert full.offload_traffic_bytes > conv.offload_traffic_bytes > 0 == base.offload_traffic_bytes
    assert base.total_ns <= conv.total_ns <= full.total_ns
    assert base.host_fraction == 0 < full.host_fraction


def test_slower_link_only_adds_time():
    g = preset("alexnet", 64)
    fast = CostModel()
    slow = CostModel(link=LINKS["page_migration"])
    d = static_decision("VDNN_ALL", "MEMORY_OPTIMAL", g, fast)
    a, b = simulate(g, d, fast, None), simulate(g, d, slow, None)
    assert b.total_ns > a.total_ns and b.stall_ns > a.stall_ns
    assert a.max_mem_bytes == b.max_mem_bytes and a.offload_traffic_bytes == b.offload_traffic_bytes


def test_oom_verdict_and_cleanup():
    g = preset("vgg16", 64)
    cm = CostModel()
    d = static_decision("BASELINE", "PERF_OPTIMAL", g, cm)
    rep = simulate(g, d, cm, 2 * GiB)
    assert not rep.passed and rep.verdict.status == "OOM" and rep.verdict.phase == "FWD"
    assert "OOM" in str(rep.verdict) and rep.max_mem_bytes <= 2 * GiB
    assert replay_check(rep, g, d, 2 * GiB) == []
    tiny = simulate(g, d, cm, 1024)
    assert not tiny.passed and tiny.verdict.layer == 1  # the first weight tensor


def test_replanned_placement_for_tight_fit():
    g = preset("vgg16", 256)
    cm = CostModel()
    d = static_decision("VDNN_ALL", "MEMORY_OPTIMAL", g, cm)
    raw = simulate(g, d, cm, 12 * GiB, replan=False)
    assert not raw.passed and raw.verdict.fragmented
    rep = simulate(g, d, cm, 12 * GiB)
    assert rep.passed and rep.placement == "replanned"
    assert replay_check(rep, g, d, 12 * GiB) == []
    free = simulate(g, d, cm, None)
    # placement cannot change timing or the byte counts
    assert (rep.total_ns, rep.max_mem_bytes, rep.offload_traffic_bytes) == (
        free.total_ns, free.max_mem_bytes, free.offload_traffic_bytes)
    assert [(e.kind, e.layer, e.start, e.end) for e in rep.events] == [
        (e.kind, e.layer, e.start, e.end) for e in free.events]


def test_determinism():
    g = preset("inception_toy", 16)
    cm = CostModel()
    d = static_decision("VDNN_ALL", "PERF_OPTIMAL", g, cm)
    a, b = simulate(g, d, cm, 8 * 2**20), simulate(g, d, cm, 8 * 2**20)
    assert [e.as_row() for e in a.events] == [e.as_row() for e in b.events]
    assert a.summary() == b.summary()


def test_event_rows_and_trace():
    g = chain(2)
    cm = CostModel()
    rep = simulate(g, static_decision("VDNN_ALL", "MEMORY_OPTIMAL", g, cm), cm, None, trace_pool=True)
    assert all(len(e.as_row()) == len(EVENT_COLUMNS) for e in rep.events)
    allocs = [e for e in rep.events if e.kind is EventKind.ALLOC]
    assert len([t for t in rep.pool_trace if t[1] == "alloc"]) == len(allocs)
    assert rep.pool_trace[-1][5] == 0
    assert {e.stream for e in rep.events} == {Stream.COMPUTE, Stream.MEMORY}


def test_on_demand_prefetch_without_finder():
    g = preset("alexnet", 16)
    cm = CostModel()
    d = static_decision("VDNN_ALL", "MEMORY_OPTIMAL", g, cm)
    normal = simulate(g, d, cm, None)
    lazy = simulate(g, d, cm, None, prefetch_finder=lambda cur, state, graph: None)
    assert lazy.passed and replay_check(lazy, g, d, None) == []
    assert lazy.prefetch_traffic_bytes == normal.prefetch_traffic_bytes
    assert lazy.total_ns >= normal.total_ns and lazy.stall_ns > normal.stall_ns


def test_input_flag_alone_is_inert():
    g = chain(2)
    cm = CostModel()
    base = static_decision("BASELINE", "MEMORY_OPTIMAL", g, cm)
    flags = [False] * len(g)
    flags[0] = True
    d = PolicyDecision(tuple(flags), base.algo, "PER_LAYER")
    rep = simulate(g, d, cm, None)
    assert rep.offload_traffic_bytes == 0


def test_invalid_decisions():
    g = chain(2)
    cm = CostModel()
    d = static_decision("BASELINE", "PERF_OPTIMAL", g, cm)
    with pytest.raises(InvalidDecision):
        simulate(g, PolicyDecision(d.offload[:-1], d.algo), cm)
    with pytest.raises(InvalidDecision):
        simulate(g, PolicyDecision(d.offload, {1: ConvAlgo.FFT}), cm)
    with pytest.raises(InvalidDecision):
        simulate(g, PolicyDecision(d.offload, {**d.algo, 2: ConvAlgo.FFT}), cm)


def test_graph_needs_trailing_loss():
    b = LayerBuilder()
    b.input(1, 1, 4, 4)
    b.conv(2, 1)
    g = b.build()
    d = PolicyDecision((False, False), {1: ConvAlgo.IMPLICIT_GEMM})
    with pytest.raises(InvalidGraph):
        simulate(g, d)


def test_per_layer_frees_everything_and_peaks_lower():
    g = preset("vgg16", 16)
    cm = CostModel()
    d = static_decision("BASELINE", "MEMORY_OPTIMAL", g, cm)
    per = PolicyDecision(d.offload, d.algo, "PER_LAYER", "per-layer")
    a, b = simulate(g, d, cm, None), simulate(g, per, cm, None)
    assert replay_check(b, g, per, None) == []
    # freeing dead maps beats holding the whole network
    assert b.avg_mem_bytes < a.avg_mem_bytes


def test_backward_prefetch_hides_behind_compute():
    g = preset("vgg16", 64)
    cm = CostModel()
    d = static_decision("VDNN_CONV", "MEMORY_OPTIMAL", g, cm)
    rep = simulate(g, d, cm, None)
    plan = tensor_plan(g)
    pre = [e for e in rep.events if e.kind is EventKind.PREFETCH]
    bwd = by_kind(rep, EventKind.BWD)
    assert pre
    for p in pre:
        b = int(p.tensor[1:])
        user = plan.last_bwd_user[b]
        assert p.end <= bwd[user].start
    assert all(g[e.layer].kind is LayerKind.CONV for e in rep.events if e.kind is EventKind.OFFLOAD)
