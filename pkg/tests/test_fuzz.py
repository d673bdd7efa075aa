import random

from vdnnsim.costmodel import CostModel
from vdnnsim.fuzz import MAX_LAYERS, random_decision, random_graph, run_campaign
from vdnnsim.netgraph import LayerKind
from vdnnsim.simcore import OFFLOADABLE


def test_random_graphs_are_valid_training_graphs():
    rng = random.Random(11)
    forks = joins = 0
    for _ in range(500):
        g = random_graph(rng)
        assert 3 <= len(g) <= MAX_LAYERS
        assert g[0].kind is LayerKind.INPUT and g[-1].kind is LayerKind.LOSS
        assert [l.id for l in g.layers if not g.consumers[l.id]] == [len(g) - 1]
        forks += any(len(c) > 1 for c in g.consumers)
        joins += any(len(l.inputs) > 1 for l in g.layers)
    assert forks > 50 and joins > 50


def test_random_decisions_only_flag_offloadable_layers():
    rng = random.Random(5)
    cm = CostModel()
    for _ in range(100):
        g = random_graph(rng)
        d = random_decision(rng, g, cm)
        assert all(g[i].kind in OFFLOADABLE for i in d.offloaded_layers())
        assert set(d.algo) == set(g.conv_ids())


def test_campaign_is_deterministic_and_clean():
    a = run_campaign(seed=7, trials=60)
    b = run_campaign(seed=7, trials=60)
    assert a.ok, (a.violations[:5], a.pool_violations[:5])
    assert {k: v for k, v in a.summary().items() if k != "seconds"} == {
        k: v for k, v in b.summary().items() if k != "seconds"}
    assert a.runs >= 4 * 60 and 0 < a.passed_runs < a.runs
