"""Layer descriptors, the producer/consumer dataflow graph, shape inference and
the benchmark network presets."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

UINT64_MAX = 2**64 - 1


class GraphError(ValueError):
    """Base class for graph construction failures."""


class ShapeMismatch(GraphError):
    pass


class UnknownPreset(GraphError):
    pass


class InvalidDepth(GraphError):
    pass


class InvalidGraph(GraphError):
    pass


class LayerKind(str, enum.Enum):
    INPUT = "INPUT"
    CONV = "CONV"
    ACTV = "ACTV"
    POOL = "POOL"
    FC = "FC"
    LOSS = "LOSS"


COMPUTE_KINDS = frozenset({LayerKind.CONV, LayerKind.ACTV, LayerKind.POOL, LayerKind.FC})


@dataclass(frozen=True)
class TensorShape:
    n: int
    c: int
    h: int
    w: int

    def __post_init__(self):
        for name in ("n", "c", "h", "w"):
            v = getattr(self, name)
            if not isinstance(v, int) or v < 1:
                raise ShapeMismatch(f"tensor dimension {name}={v!r} must be a positive integer")
        if self.numel > UINT64_MAX:
            raise ShapeMismatch(f"element count of {self} exceeds 64 bits")

    @property
    def numel(self) -> int:
        return self.n * self.c * self.h * self.w

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.n, self.c, self.h, self.w)


@dataclass(frozen=True)
class ConvParams:
    kernel: int
    stride: int
    pad: int
    out_channels: int


@dataclass(frozen=True)
class PoolParams:
    window: int
    stride: int


@dataclass(frozen=True)
class FCParams:
    out_features: int


@dataclass(frozen=True)
class LayerDescriptor:
    id: int
    kind: LayerKind
    inputs: tuple[int, ...] = ()
    conv: ConvParams | None = None
    pool: PoolParams | None = None
    fc: FCParams | None = None
    # Shape of the data batch; present iff kind is INPUT.
    data: TensorShape | None = None
    # How multiple inputs are combined before the layer's own operation.
    join: str = "concat"
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind(self.kind))
        object.__setattr__(self, "inputs", tuple(self.inputs))
        kind = self.kind
        if (self.conv is not None) != (kind is LayerKind.CONV):
            raise InvalidGraph(f"layer {self.id}: conv params present iff kind is CONV")
        if (self.pool is not None) != (kind is LayerKind.POOL):
            raise InvalidGraph(f"layer {self.id}: pool params present iff kind is POOL")
        if (self.fc is not None) != (kind is LayerKind.FC):
            raise InvalidGraph(f"layer {self.id}: fc params present iff kind is FC")
        if (self.data is not None) != (kind is LayerKind.INPUT):
            raise InvalidGraph(f"layer {self.id}: data shape present iff kind is INPUT")
        if kind is LayerKind.INPUT:
            if self.inputs:
                raise InvalidGraph(f"layer {self.id}: INPUT layers take no inputs")
        elif not self.inputs:
            raise InvalidGraph(f"layer {self.id}: {kind.value} layer needs at least one input")
        if kind in (LayerKind.ACTV, LayerKind.LOSS) and len(self.inputs) != 1:
            raise InvalidGraph(f"layer {self.id}: {kind.value} layers take exactly one input")
        if len(set(self.inputs)) != len(self.inputs):
            raise InvalidGraph(f"layer {self.id}: duplicate input ids {self.inputs}")
        if self.join not in ("concat", "add"):
            raise InvalidGraph(f"layer {self.id}: unknown join rule {self.join!r}")

    @property
    def label(self) -> str:
        return self.name or f"{self.kind.value.lower()}{self.id}"


@dataclass(frozen=True)
class NetworkGraph:
    """Immutable DAG of layers. Layer ids equal list positions and the list
    order is the forward (topological) order."""

    layers: tuple[LayerDescriptor, ...]
    shapes: tuple[TensorShape, ...] | None = None
    refcnt: tuple[int, ...] | None = None
    name: str = ""
    consumers: tuple[tuple[int, ...], ...] = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        cons: list[list[int]] = [[] for _ in layers]
        for pos, layer in enumerate(layers):
            if layer.id != pos:
                raise InvalidGraph(f"layer at position {pos} has id {layer.id}; ids must follow forward order")
            for src in layer.inputs:
                if not 0 <= src < pos:
                    # an input at or after the consumer is either a cycle or a non-topological listing
                    raise InvalidGraph(f"layer {pos} reads layer {src}, which does not precede it")
                cons[src].append(pos)
        for pos, layer in enumerate(layers):
            if layer.kind is LayerKind.LOSS and cons[pos]:
                raise InvalidGraph(f"LOSS layer {pos} cannot have consumers")
            if layer.kind is LayerKind.ACTV:
                src = layer.inputs[0]
                if len(cons[src]) != 1:
                    # in-place activation overwrites its producer's buffer
                    raise InvalidGraph(f"ACTV layer {pos} is in-place, so its producer {src} must have no other consumers")
                if layers[src].kind is LayerKind.INPUT:
                    raise InvalidGraph(f"ACTV layer {pos} cannot overwrite the input data in place")
        object.__setattr__(self, "consumers", tuple(tuple(c) for c in cons))

    def __len__(self) -> int:
        return len(self.layers)

    def __getitem__(self, lid: int) -> LayerDescriptor:
        return self.layers[lid]

    @property
    def edges(self) -> list[tuple[int, int]]:
        return [(src, l.id) for l in self.layers for src in l.inputs]

    @property
    def forward_order(self) -> list[int]:
        return list(range(len(self.layers)))

    @property
    def backward_order(self) -> list[int]:
        return list(reversed(self.forward_order))

    def shape(self, lid: int) -> TensorShape:
        if self.shapes is None:
            raise InvalidGraph("shapes have not been inferred")
        return self.shapes[lid]

    def count(self, kind: LayerKind) -> int:
        return sum(1 for l in self.layers if l.kind is kind)

    def conv_ids(self) -> list[int]:
        return [l.id for l in self.layers if l.kind is LayerKind.CONV]

    def input_shape(self, lid: int) -> TensorShape:
        """Shape of the layer's (joined) input."""
        layer = self.layers[lid]
        return _join([self.shape(i) for i in layer.inputs], layer)


def _join(shapes: Sequence[TensorShape], layer: LayerDescriptor) -> TensorShape:
    if len(shapes) == 1:
        return shapes[0]
    first = shapes[0]
    if layer.join == "add":
        if any(s != first for s in shapes):
            raise ShapeMismatch(f"layer {layer.id}: elementwise join needs identical shapes, got {shapes}")
        return first
    if layer.kind is LayerKind.FC:
        if any(s.n != first.n for s in shapes):
            raise ShapeMismatch(f"layer {layer.id}: concat join needs equal batch, got {shapes}")
        return TensorShape(first.n, sum(s.c * s.h * s.w for s in shapes), 1, 1)
    if any((s.n, s.h, s.w) != (first.n, first.h, first.w) for s in shapes):
        raise ShapeMismatch(f"layer {layer.id}: concat join needs equal n/h/w, got {shapes}")
    return TensorShape(first.n, sum(s.c for s in shapes), first.h, first.w)


def _output_shape(layer: LayerDescriptor, x: TensorShape | None) -> TensorShape:
    kind = layer.kind
    if kind is LayerKind.INPUT:
        return layer.data
    if kind in (LayerKind.ACTV, LayerKind.LOSS):
        return x
    if kind is LayerKind.CONV:
        p = layer.conv
        outs = []
        for dim in (x.h, x.w):
            span = dim + 2 * p.pad - p.kernel
            if span < 0 or span % p.stride:
                raise ShapeMismatch(
                    f"layer {layer.id}: ({dim} + 2*{p.pad} - {p.kernel}) is not a non-negative multiple of stride {p.stride}"
                )
            outs.append(span // p.stride + 1)
        return TensorShape(x.n, p.out_channels, outs[0], outs[1])
    if kind is LayerKind.POOL:
        p = layer.pool
        if x.h < p.window or x.w < p.window:
            raise ShapeMismatch(f"layer {layer.id}: pool window {p.window} larger than input {x.h}x{x.w}")
        return TensorShape(x.n, x.c, (x.h - p.window) // p.stride + 1, (x.w - p.window) // p.stride + 1)
    if kind is LayerKind.FC:
        return TensorShape(x.n, layer.fc.out_features, 1, 1)
    raise InvalidGraph(f"unhandled layer kind {kind}")


def infer_shapes(graph: NetworkGraph) -> NetworkGraph:
    shapes: list[TensorShape] = []
    for layer in graph.layers:
        x = _join([shapes[i] for i in layer.inputs], layer) if layer.inputs else None
        shapes.append(_output_shape(layer, x))
    return replace(graph, shapes=tuple(shapes))


def compute_refcounts(graph: NetworkGraph) -> NetworkGraph:
    return replace(graph, refcnt=tuple(len(c) for c in graph.consumers))


def build_graph(layers: Iterable[LayerDescriptor], name: str = "") -> NetworkGraph:
    """Validate, infer shapes and count consumers in one step."""
    return compute_refcounts(infer_shapes(NetworkGraph(tuple(layers), name=name)))


class LayerBuilder:
    """Appends layers in forward order, tracking the most recent output."""

    def __init__(self):
        self.layers: list[LayerDescriptor] = []

    @property
    def last(self) -> int:
        return len(self.layers) - 1

    def _add(self, kind, inputs=None, **kw) -> int:
        if inputs is None:
            inputs = (self.last,)
        self.layers.append(LayerDescriptor(id=len(self.layers), kind=kind, inputs=tuple(inputs), **kw))
        return self.last

    def input(self, n, c, h, w, name="data"):
        return self._add(LayerKind.INPUT, inputs=(), data=TensorShape(n, c, h, w), name=name)

    def conv(self, out, k, s=1, p=0, name="", inputs=None, join="concat"):
        return self._add(LayerKind.CONV, inputs, conv=ConvParams(k, s, p, out), name=name, join=join)

    def actv(self, name="", inputs=None):
        return self._add(LayerKind.ACTV, inputs, name=name)

    def pool(self, window, stride, name="", inputs=None, join="concat"):
        return self._add(LayerKind.POOL, inputs, pool=PoolParams(window, stride), name=name, join=join)

    def fc(self, out, name="", inputs=None, join="concat"):
        return self._add(LayerKind.FC, inputs, fc=FCParams(out), name=name, join=join)

    def loss(self, name="loss"):
        return self._add(LayerKind.LOSS, name=name)

    def build(self, name="") -> NetworkGraph:
        return build_graph(self.layers, name=name)


VGG_GROUPS = ((64, 2), (128, 2), (256, 3), (512, 3), (512, 3))
VGG_DEPTHS = (0, 100, 200, 300, 400)
PRESETS = ("alexnet", "overfeat", "vgg16", "inception_toy")


def _vgg(batch: int, extra_per_group: int, name: str) -> NetworkGraph:
    b = LayerBuilder()
    b.input(batch, 3, 224, 224)
    for g, (channels, count) in enumerate(VGG_GROUPS, start=1):
        for i in range(1, count + extra_per_group + 1):
            b.conv(channels, 3, 1, 1, name=f"conv{g}_{i}")
            b.actv(name=f"relu{g}_{i}")
        b.pool(2, 2, name=f"pool{g}")
    b.fc(4096, name="fc6")
    b.actv(name="relu6")
    b.fc(4096, name="fc7")
    b.actv(name="relu7")
    b.fc(1000, name="fc8")
    b.loss()
    return b.build(name)


def _alexnet(batch: int) -> NetworkGraph:
    # 227x227 input makes conv1's 11x11/4 arithmetic exact
    b = LayerBuilder()
    b.input(batch, 3, 227, 227)
    b.conv(64, 11, 4, 0, name="conv1")
    b.actv(name="relu1")
    b.pool(3, 2, name="pool1")
    b.conv(192, 5, 1, 2, name="conv2")
    b.actv(name="relu2")
    b.pool(3, 2, name="pool2")
    b.conv(384, 3, 1, 1, name="conv3")
    b.actv(name="relu3")
    b.conv(256, 3, 1, 1, name="conv4")
    b.actv(name="relu4")
    b.conv(256, 3, 1, 1, name="conv5")
    b.actv(name="relu5")
    b.pool(3, 2, name="pool5")
    b.fc(4096, name="fc6")
    b.actv(name="relu6")
    b.fc(1000, name="fc7")
    b.loss()
    return b.build("alexnet")


def _overfeat(batch: int, variant: str = "fast") -> NetworkGraph:
    if variant != "fast":
        raise UnknownPreset(f"overfeat variant {variant!r} is not modeled (only 'fast')")
    b = LayerBuilder()
    b.input(batch, 3, 231, 231)
    b.conv(96, 11, 4, 0, name="conv1")
    b.actv(name="relu1")
    b.pool(2, 2, name="pool1")
    b.conv(256, 5, 1, 0, name="conv2")
    b.actv(name="relu2")
    b.pool(2, 2, name="pool2")
    b.conv(512, 3, 1, 1, name="conv3")
    b.actv(name="relu3")
    b.conv(1024, 3, 1, 1, name="conv4")
    b.actv(name="relu4")
    b.conv(1024, 3, 1, 1, name="conv5")
    b.actv(name="relu5")
    b.pool(2, 2, name="pool5")
    b.fc(3072, name="fc6")
    b.actv(name="relu6")
    b.fc(4096, name="fc7")
    b.actv(name="relu7")
    b.fc(1000, name="fc8")
    b.loss()
    return b.build("overfeat")


def _inception_toy(batch: int) -> NetworkGraph:
    b = LayerBuilder()
    b.input(batch, 3, 32, 32)
    b.conv(64, 3, 1, 1, name="stem")
    fork = b.actv(name="stem_relu")
    b.conv(32, 1, 1, 0, name="branch1_1x1", inputs=(fork,))
    left = b.actv(name="branch1_relu")
    b.conv(16, 1, 1, 0, name="branch2_reduce", inputs=(fork,))
    b.actv(name="branch2_relu_a")
    b.conv(32, 3, 1, 1, name="branch2_3x3")
    right = b.actv(name="branch2_relu_b")
    b.conv(64, 1, 1, 0, name="join_1x1", inputs=(left, right), join="concat")
    b.actv(name="join_relu")
    b.pool(2, 2, name="pool")
    b.fc(10, name="fc")
    b.loss()
    return b.build("inception_toy")


def build_preset(name: str, batch: int, variant: str = "fast") -> NetworkGraph:
    if not isinstance(batch, int) or batch < 1:
        raise InvalidGraph(f"batch must be a positive integer, got {batch!r}")
    if name == "vgg16":
        return _vgg(batch, 0, "vgg16")
    if name == "alexnet":
        return _alexnet(batch)
    if name == "overfeat":
        return _overfeat(batch, variant)
    if name == "inception_toy":
        return _inception_toy(batch)
    if name.startswith("vgg") and name[3:].isdigit():
        return extend_vgg(int(name[3:]) - 16, batch)
    raise UnknownPreset(f"unknown preset {name!r}; choose from {', '.join(PRESETS)} or vgg116..vgg416")


def extend_vgg(extra_conv_layers: int, batch: int) -> NetworkGraph:
    """VGG-16 deepened by ``extra_conv_layers``, spread evenly over the five
    convolution groups."""
    if extra_conv_layers not in VGG_DEPTHS:
        raise InvalidDepth(f"extra_conv_layers must be one of {VGG_DEPTHS}, got {extra_conv_layers!r}")
    if batch < 1:
        raise InvalidGraph(f"batch must be positive, got {batch}")
    per_group = extra_conv_layers // len(VGG_GROUPS)
    return _vgg(batch, per_group, f"vgg{16 + extra_conv_layers}")


# -- serialization ---------------------------------------------------------

def graph_to_dict(graph: NetworkGraph) -> dict:
    out = []
    for layer in graph.layers:
        d: dict = {"id": layer.id, "kind": layer.kind.value, "name": layer.name, "inputs": list(layer.inputs)}
        if layer.conv:
            c = layer.conv
            d["conv"] = {"kernel": c.kernel, "stride": c.stride, "pad": c.pad, "out_channels": c.out_channels}
        if layer.pool:
            d["pool"] = {"window": layer.pool.window, "stride": layer.pool.stride}
        if layer.fc:
            d["fc"] = {"out_features": layer.fc.out_features}
        if layer.data:
            d["data"] = list(layer.data.as_tuple())
        if len(layer.inputs) > 1:
            d["join"] = layer.join
        if graph.shapes is not None:
            d["shape"] = list(graph.shape(layer.id).as_tuple())
        if graph.refcnt is not None:
            d["refcnt"] = graph.refcnt[layer.id]
        out.append(d)
    return {"name": graph.name, "layers": out}


def graph_from_dict(doc: dict) -> NetworkGraph:
    layers = []
    for d in doc["layers"]:
        kw = {}
        if "conv" in d:
            kw["conv"] = ConvParams(**d["conv"])
        if "pool" in d:
            kw["pool"] = PoolParams(**d["pool"])
        if "fc" in d:
            kw["fc"] = FCParams(**d["fc"])
        if "data" in d:
            kw["data"] = TensorShape(*d["data"])
        layers.append(
            LayerDescriptor(
                id=d["id"], kind=LayerKind(d["kind"]), inputs=tuple(d.get("inputs", ())),
                name=d.get("name", ""), join=d.get("join", "concat"), **kw,
            )
        )
    return build_graph(layers, name=doc.get("name", ""))


def parse_layer_lines(text: str, batch: int | None = None) -> NetworkGraph:
    """Parse the compact line format used in config files::

        input c=3 h=32 w=32 n=8
        conv out=16 k=3 s=1 p=1
        actv
        conv out=8 k=1 inputs=1,3 join=concat
        loss

    Layers get ids by line order; ``inputs`` defaults to the previous layer.
    """
    b = LayerBuilder()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        kind, *pairs = line.split()
        opts = {}
        for pair in pairs:
            if "=" not in pair:
                raise InvalidGraph(f"line {lineno}: expected key=value, got {pair!r}")
            k, v = pair.split("=", 1)
            opts[k] = v
        inputs = tuple(int(x) for x in opts.pop("inputs").split(",")) if "inputs" in opts else None
        name = opts.pop("name", "")
        join = opts.pop("join", "concat")
        try:
            kind = kind.lower()
            if kind == "input":
                n = int(opts.pop("n", batch or 1))
                b.input(n, int(opts.pop("c")), int(opts.pop("h")), int(opts.pop("w")), name=name or "data")
            elif kind == "conv":
                b.conv(int(opts.pop("out")), int(opts.pop("k")), int(opts.pop("s", 1)), int(opts.pop("p", 0)),
                       name=name, inputs=inputs, join=join)
            elif kind == "actv":
                b.actv(name=name, inputs=inputs)
            elif kind == "pool":
                b.pool(int(opts.pop("window")), int(opts.pop("s", opts.pop("stride", 2))), name=name,
                       inputs=inputs, join=join)
            elif kind == "fc":
                b.fc(int(opts.pop("out")), name=name, inputs=inputs, join=join)
            elif kind == "loss":
                b.loss(name=name or "loss")
            else:
                raise InvalidGraph(f"line {lineno}: unknown layer kind {kind!r}")
        except KeyError as exc:
            raise InvalidGraph(f"line {lineno}: missing parameter {exc.args[0]!r}") from None
        if opts:
            raise InvalidGraph(f"line {lineno}: unknown parameters {sorted(opts)}")
    return b.build()
