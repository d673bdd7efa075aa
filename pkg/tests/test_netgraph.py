import json

import pytest

from conftest import preset
from oracles import shapes_by_hand
from vdnnsim.netgraph import (FCParams, InvalidDepth, InvalidGraph, LayerBuilder, LayerDescriptor, LayerKind,
                              NetworkGraph, ShapeMismatch, TensorShape, UnknownPreset, build_graph, build_preset,
                              extend_vgg, graph_from_dict, graph_to_dict, parse_layer_lines)


@pytest.mark.parametrize("name,batch", [("vgg16", 4), ("alexnet", 3), ("overfeat", 2), ("inception_toy", 5),
                                        ("vgg116", 1)])
def test_shapes_match_hand_arithmetic(name, batch):
    g = preset(name, batch)
    assert [s.as_tuple() for s in g.shapes] == shapes_by_hand(g)


def test_vgg16_layout():
    g = preset("vgg16", 8)
    assert g.count(LayerKind.CONV) == 13
    assert g.count(LayerKind.FC) == 3
    assert g.count(LayerKind.POOL) == 5
    # last pool output feeds fc6
    assert g.input_shape(g.layers[-6].id).as_tuple() == (8, 512, 7, 7)
    assert g.shape(len(g) - 1).as_tuple() == (8, 1000, 1, 1)


@pytest.mark.parametrize("extra", [0, 100, 200, 300, 400])
def test_extend_vgg_depth(extra):
    g = extend_vgg(extra, 2)
    assert g.count(LayerKind.CONV) == 13 + extra
    assert g.name == f"vgg{16 + extra}"
    assert build_preset(f"vgg{16 + extra}", 2).layers == g.layers


def test_alexnet_conv1_is_exact():
    g = preset("alexnet", 1)
    assert g.shape(1).as_tuple() == (1, 64, 55, 55)


def test_refcounts_and_consumers():
    g = preset("inception_toy", 2)
    fork = 2
    assert g[fork].kind is LayerKind.ACTV
    # the fork point is read by both branches
    assert len(g.consumers[1]) == 1 and g.consumers[2] == (3, 5)
    assert g.refcnt == tuple(len(c) for c in g.consumers)
    assert g.refcnt[-1] == 0
    join = next(l for l in g.layers if len(l.inputs) == 2)
    assert g.input_shape(join.id).c == 64


def test_edges_and_orders():
    g = preset("inception_toy", 1)
    assert all(src < dst for src, dst in g.edges)
    assert g.backward_order == list(reversed(g.forward_order))


@pytest.mark.parametrize("bad", [
    lambda b: (b.input(1, 1, 4, 4), b.conv(2, 3, 1, 1), b.actv(), b.conv(2, 1, inputs=(1,))),
    lambda b: (b.input(1, 1, 4, 4), b.actv()),
    lambda b: (b.input(1, 1, 4, 4), b.conv(2, 1), b.loss(), b.fc(2)),
])
def test_invalid_structures(bad):
    b = LayerBuilder()
    with pytest.raises(InvalidGraph):
        bad(b)
        b.build()


def test_forward_reference_rejected():
    layers = [LayerDescriptor(0, LayerKind.INPUT, data=TensorShape(1, 1, 4, 4)),
              LayerDescriptor(1, LayerKind.FC, inputs=(2,), fc=FCParams(2))]
    with pytest.raises(InvalidGraph):
        NetworkGraph(tuple(layers))


def test_shape_mismatches():
    b = LayerBuilder()
    b.input(1, 1, 5, 5)
    b.conv(2, 2, 2, 0)  # (5 - 2) is not a multiple of 2
    with pytest.raises(ShapeMismatch):
        b.build()
    b = LayerBuilder()
    b.input(1, 1, 8, 8)
    b.conv(2, 1)
    b.conv(2, 2, 2, 0, inputs=(0,))
    b.conv(2, 1, inputs=(1, 2))  # concat of 8x8 and 4x4
    with pytest.raises(ShapeMismatch):
        b.build()
    with pytest.raises(ShapeMismatch):
        TensorShape(1, 0, 1, 1)


def test_add_join_and_fc_concat():
    b = LayerBuilder()
    b.input(2, 3, 8, 8)
    b.conv(4, 3, 1, 1)
    b.conv(4, 1, inputs=(0,))
    b.conv(6, 1, inputs=(1, 2), join="add")
    b.fc(5, inputs=(1, 3))
    b.loss()
    g = b.build()
    assert g.input_shape(3).as_tuple() == (2, 4, 8, 8)
    assert g.input_shape(4).as_tuple() == (2, (4 + 6) * 64, 1, 1)


def test_presets_errors():
    with pytest.raises(UnknownPreset):
        build_preset("resnet50", 1)
    with pytest.raises(InvalidDepth):
        extend_vgg(50, 1)
    with pytest.raises(InvalidGraph):
        build_preset("vgg16", 0)
    with pytest.raises(UnknownPreset):
        build_preset("overfeat", 1, "accurate")


@pytest.mark.parametrize("name", ["vgg16", "inception_toy", "alexnet"])
def test_dict_round_trip(name):
    g = preset(name, 3)
    doc = json.loads(json.dumps(graph_to_dict(g)))
    back = graph_from_dict(doc)
    assert back.layers == g.layers and back.shapes == g.shapes and back.refcnt == g.refcnt
    assert back.name == g.name


def test_layer_lines():
    text = """
    input c=3 h=8 w=8        # data
    conv out=4 k=3 s=1 p=1
    actv
    conv out=4 k=1 inputs=2
    conv out=2 k=1 inputs=2  # fork
    pool window=2 s=2 inputs=3,4
    fc out=3
    loss
    """
    g = parse_layer_lines(text, batch=6)
    assert g.shape(0).as_tuple() == (6, 3, 8, 8)
    assert g.shape(5).as_tuple() == (6, 6, 4, 4)
    assert g.consumers[2] == (3, 4)
    with pytest.raises(InvalidGraph, match="line 1"):
        parse_layer_lines("bogus x=1")
    with pytest.raises(InvalidGraph, match="missing parameter"):
        parse_layer_lines("input c=3 h=8")
    with pytest.raises(InvalidGraph, match="unknown parameters"):
        parse_layer_lines("input c=3 h=8 w=8 q=1")


def test_build_graph_single_step():
    layers = [LayerDescriptor(0, LayerKind.INPUT, data=TensorShape(1, 2, 3, 3)),
              LayerDescriptor(1, LayerKind.LOSS, inputs=(0,))]
    g = build_graph(layers)
    assert g.shapes[1] == g.shapes[0] and g.refcnt == (1, 0)
