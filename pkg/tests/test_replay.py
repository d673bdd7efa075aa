"""The validator must flag each kind of corrupted log."""

from dataclasses import replace

import pytest

from conftest import preset
from vdnnsim.costmodel import CostModel
from vdnnsim.policy import static_decision
from vdnnsim.replay import replay_check
from vdnnsim.simcore import EventKind, simulate


@pytest.fixture(scope="module")
def clean():
    g = preset("alexnet", 16)
    cm = CostModel()
    d = static_decision("VDNN_ALL", "MEMORY_OPTIMAL", g, cm)
    rep = simulate(g, d, cm, None)
    assert replay_check(rep, g, d, None) == []
    return g, d, rep


def _index(rep, kind, pred=lambda e: True):
    return next(i for i, e in enumerate(rep.events) if e.kind is kind and pred(e))


def _check(clean, events, **fields):
    g, d, rep = clean
    return replay_check(replace(rep, events=events, **fields), g, d, None)


def _edit(rep, i, **kw):
    ev = list(rep.events)
    ev[i] = replace(ev[i], **kw)
    return ev


def test_release_before_offload_completes(clean):
    g, d, rep = clean
    off = rep.events[_index(rep, EventKind.OFFLOAD)]
    i = _index(rep, EventKind.RELEASE, lambda e: e.tensor == off.tensor and e.phase == "FWD")
    msgs = _check(clean, _edit(rep, i, start=off.end - 1, end=off.end - 1))
    assert any("before its offload ends" in m for m in msgs)


def test_use_after_release(clean):
    g, d, rep = clean
    # drop the prefetch's re-allocation: the backward step then reads a released map
    pre = rep.events[_index(rep, EventKind.PREFETCH)]
    i = _index(rep, EventKind.ALLOC, lambda e: e.tensor == pre.tensor and e.phase == "BWD")
    ev = list(rep.events)
    del ev[i]
    msgs = _check(clean, ev)
    assert any("not resident" in m for m in msgs)


def test_prefetch_arrives_after_use(clean):
    g, d, rep = clean
    i = _index(rep, EventKind.PREFETCH)
    e = rep.events[i]
    msgs = _check(clean, _edit(rep, i, start=e.start + 10**9, end=e.end + 10**9))
    assert any("before the prefetch" in m for m in msgs)


def test_missing_prefetch(clean):
    g, d, rep = clean
    ev = list(rep.events)
    del ev[_index(rep, EventKind.PREFETCH)]
    msgs = _check(clean, ev)
    assert any("never prefetched" in m for m in msgs)
    assert any("prefetch traffic differs" in m for m in msgs)


def test_pool_overlap(clean):
    g, d, rep = clean
    first = rep.events[_index(rep, EventKind.ALLOC)]
    i = _index(rep, EventKind.ALLOC, lambda e: e.phase == "FWD" and e.tensor.startswith("Y"))
    msgs = _check(clean, _edit(rep, i, offset=first.offset))
    assert any("pool overlap" in m for m in msgs)


def test_negative_refcount(clean):
    g, d, rep = clean
    i = _index(rep, EventKind.FWD, lambda e: e.layer == 3)
    ev = list(rep.events)
    ev.insert(i + 1, ev[i])
    msgs = _check(clean, ev)
    assert any("negative consumer count" in m for m in msgs)
    assert any("queue overlap" in m for m in msgs)


def test_double_allocation_and_leak(clean):
    g, d, rep = clean
    i = _index(rep, EventKind.ALLOC)
    ev = list(rep.events)
    ev.insert(i + 1, replace(ev[i], offset=10**12))
    msgs = _check(clean, ev)
    assert any("allocated twice" in m for m in msgs)
    assert any("still allocated" in m for m in msgs)


def test_release_of_dead_tensor(clean):
    g, d, rep = clean
    i = _index(rep, EventKind.RELEASE)
    ev = list(rep.events)
    ev.insert(i + 1, ev[i])
    assert any("not live" in m for m in _check(clean, ev))


def test_sync_rule_and_totals(clean):
    g, d, rep = clean
    i = _index(rep, EventKind.FWD, lambda e: e.layer == 4)
    e = rep.events[i]
    msgs = _check(clean, _edit(rep, i, start=e.start + 7, end=e.end + 7))
    assert any("sync rule" in m for m in msgs)
    msgs = _check(clean, list(rep.events), max_mem_bytes=rep.max_mem_bytes + 512, stall_ns=rep.stall_ns + 1,
                  avg_mem_bytes=rep.avg_mem_bytes * 1.01)
    assert any("high-water" in m for m in msgs)
    assert any("summed SYNC" in m for m in msgs)
    assert any("replayed integral" in m for m in msgs)


def test_unflagged_offload(clean):
    g, d, rep = clean
    flags = list(d.offload)
    off = rep.events[_index(rep, EventKind.OFFLOAD)]
    flags[off.layer] = False
    msgs = replay_check(rep, g, replace(d, offload=tuple(flags)), None)
    assert any("without being flagged" in m for m in msgs)


def test_capacity_breach(clean):
    g, d, rep = clean
    msgs = replay_check(rep, g, d, rep.max_mem_bytes - 512)
    assert any("capacity exceeded" in m for m in msgs)
    assert any("PASS verdict" in m for m in msgs)


def test_inverted_interval(clean):
    g, d, rep = clean
    i = _index(rep, EventKind.BWD)
    e = rep.events[i]
    msgs = _check(clean, _edit(rep, i, end=e.start - 1))
    assert any("ends before it starts" in m for m in msgs)
