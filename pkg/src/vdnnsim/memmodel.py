"""Footprint accounting and the fixed-capacity suballocating device pool."""

from __future__ import annotations

import bisect
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from .costmodel import ConvAlgo, CostModel
from .netgraph import COMPUTE_KINDS, UINT64_MAX, LayerKind, NetworkGraph, TensorShape

ALIGNMENT = 512


class TensorOverflow(OverflowError):
    pass


class PoolError(RuntimeError):
    pass


class UnknownAllocation(PoolError):
    pass


class DoubleFree(UnknownAllocation):
    pass


class PoolOOM(PoolError):
    def __init__(self, requested: int, free_bytes: int, largest_free: int, tag: str = ""):
        self.requested = requested
        self.free_bytes = free_bytes
        self.largest_free = largest_free
        self.tag = tag
        # enough bytes exist in total, just not contiguously
        self.fragmented = free_bytes >= requested
        super().__init__(
            f"cannot allocate {requested} bytes for {tag or 'request'}: "
            f"{free_bytes} free, largest extent {largest_free}"
            + (" (fragmented)" if self.fragmented else "")
        )


def tensor_bytes(shape: TensorShape, elem_size: int = 4) -> int:
    nbytes = shape.n * shape.c * shape.h * shape.w * elem_size
    if nbytes > UINT64_MAX:
        raise TensorOverflow(f"{shape} x {elem_size} B exceeds 64 bits")
    return nbytes


def align_up(nbytes: int, alignment: int = ALIGNMENT) -> int:
    return -(-nbytes // alignment) * alignment


# -- tensor plan -------------------------------------------------------------

@dataclass(frozen=True)
class TensorPlan:
    """Buffer-level view of a graph.

    Feature buffers are keyed by the id of the layer that allocates them.
    In-place ACTV layers write into their producer's buffer, so ``buf[l]`` of
    an ACTV layer is the buffer of its input.
    """

    buf: tuple[int | None, ...]
    in_bufs: tuple[tuple[int, ...], ...]
    # buffers touched by at least one compute layer; sentinel-only data is free
    counted: frozenset[int]
    buffer_bytes: Mapping[int, int]
    fwd_readers: Mapping[int, int]
    bwd_needs: tuple[tuple[int, ...], ...]
    last_bwd_user: Mapping[int, int]
    # buffer -> layer after whose backward the buffer's gradient is dead
    grad_release_after: Mapping[int, int]


def tensor_plan(graph: NetworkGraph, elem_size: int = 4) -> TensorPlan:
    buf: list[int | None] = []
    in_bufs: list[tuple[int, ...]] = []
    for layer in graph.layers:
        ins = tuple(dict.fromkeys(buf[i] for i in layer.inputs))
        in_bufs.append(ins)
        if layer.kind is LayerKind.ACTV:
            buf.append(buf[layer.inputs[0]])
        elif layer.kind is LayerKind.LOSS:
            buf.append(None)
        else:
            buf.append(layer.id)

    counted: set[int] = set()
    readers: dict[int, int] = {}
    for layer in graph.layers:
        for b in in_bufs[layer.id]:
            readers[b] = readers.get(b, 0) + 1
        if layer.kind in COMPUTE_KINDS:
            counted.update(in_bufs[layer.id])
            counted.add(buf[layer.id])

    nbytes = {b: tensor_bytes(graph.shape(b), elem_size) for b in counted}

    needs: list[tuple[int, ...]] = []
    for layer in graph.layers:
        kind = layer.kind
        if kind in (LayerKind.CONV, LayerKind.FC, LayerKind.LOSS):
            need = in_bufs[layer.id]
        elif kind is LayerKind.POOL:
            need = in_bufs[layer.id] + (buf[layer.id],)
        elif kind is LayerKind.ACTV:
            need = (buf[layer.id],)
        else:
            need = ()
        needs.append(tuple(b for b in dict.fromkeys(need) if b in counted))

    last_user: dict[int, int] = {}
    for lid in graph.backward_order:
        for b in needs[lid]:
            last_user[b] = lid  # overwritten until the lowest id remains

    grad_release: dict[int, int] = {}
    for b in counted:
        if graph[b].kind is LayerKind.INPUT:
            # no backward step consumes the data gradient; it dies with its last writer
            grad_release[b] = min(c for c in range(len(graph)) if b in in_bufs[c])
        else:
            grad_release[b] = b
    return TensorPlan(
        buf=tuple(buf), in_bufs=tuple(in_bufs), counted=frozenset(counted), buffer_bytes=nbytes,
        fwd_readers=readers, bwd_needs=tuple(needs), last_bwd_user=last_user,
        grad_release_after=grad_release,
    )


# -- footprint ---------------------------------------------------------------

@dataclass(frozen=True)
class FootprintReport:
    weights_bytes: int
    feature_maps_bytes: int
    gradient_buffers_bytes: int
    workspace_bytes: int
    weight_gradients_bytes: int = 0
    # FC weights plus maps produced by FC layers (already inside the totals above)
    classifier_bytes: int = 0

    @property
    def total_bytes(self) -> int:
        return (self.weights_bytes + self.feature_maps_bytes + self.gradient_buffers_bytes
                + self.workspace_bytes + self.weight_gradients_bytes)

    @property
    def feature_map_fraction(self) -> float:
        return self.feature_maps_bytes / self.total_bytes if self.total_bytes else 0.0

    @property
    def feature_extraction_fraction(self) -> float:
        """Share of the footprint outside the fully connected classifier."""
        return 1.0 - self.classifier_bytes / self.total_bytes if self.total_bytes else 0.0

    def as_dict(self) -> dict:
        return {
            "weights_bytes": self.weights_bytes,
            "feature_maps_bytes": self.feature_maps_bytes,
            "gradient_buffers_bytes": self.gradient_buffers_bytes,
            "workspace_bytes": self.workspace_bytes,
            "weight_gradients_bytes": self.weight_gradients_bytes,
            "total_bytes": self.total_bytes,
            "feature_map_fraction": self.feature_map_fraction,
            "classifier_bytes": self.classifier_bytes,
            "feature_extraction_fraction": self.feature_extraction_fraction,
        }


def weight_bytes(graph: NetworkGraph, lid: int, elem_size: int = 4) -> int:
    """Weights plus bias of a CONV or FC layer; zero elsewhere."""
    layer = graph[lid]
    if layer.kind is LayerKind.CONV:
        x = graph.input_shape(lid)
        k = layer.conv.kernel
        return (k * k * x.c + 1) * layer.conv.out_channels * elem_size
    if layer.kind is LayerKind.FC:
        x = graph.input_shape(lid)
        return (x.c * x.h * x.w + 1) * layer.fc.out_features * elem_size
    return 0


def baseline_footprint(graph: NetworkGraph, algos: Mapping[int, ConvAlgo] | None = None,
                       cost: CostModel | None = None, alignment: int = ALIGNMENT,
                       include_weight_grads: bool = False) -> FootprintReport:
    """Network-wide allocation: every weight and feature map resident, two
    gradient buffers sized to the largest gradient map, and one workspace
    sized to the largest requirement. Each tensor is rounded up to the pool
    alignment so the total is exactly what the pool must hold."""
    cost = cost or CostModel()
    algos = algos or {}
    elem = cost.elem_size
    plan = tensor_plan(graph, elem)
    weights = [align_up(weight_bytes(graph, l.id, elem), alignment) for l in graph.layers
               if l.kind in (LayerKind.CONV, LayerKind.FC)]
    maps = [align_up(plan.buffer_bytes[b], alignment) for b in sorted(plan.counted)]
    grad = 2 * max(maps, default=0)
    ws = max((align_up(cost.conv_workspace(graph, lid, algos.get(lid, ConvAlgo.IMPLICIT_GEMM)), alignment)
              for lid in graph.conv_ids()), default=0)
    classifier = sum(align_up(weight_bytes(graph, l.id, elem), alignment) for l in graph.layers
                     if l.kind is LayerKind.FC)
    classifier += sum(align_up(plan.buffer_bytes[b], alignment) for b in plan.counted
                      if graph[b].kind is LayerKind.FC)
    return FootprintReport(
        weights_bytes=sum(weights), feature_maps_bytes=sum(maps), gradient_buffers_bytes=grad,
        workspace_bytes=ws, weight_gradients_bytes=sum(weights) if include_weight_grads else 0,
        classifier_bytes=classifier,
    )


# -- pool --------------------------------------------------------------------

@dataclass(frozen=True)
class PoolStats:
    current_bytes: int
    high_water_bytes: int
    live_count: int
    largest_free_extent: int


@dataclass
class Allocation:
    offset: int
    length: int
    requested: int
    tag: str


UNBOUNDED = 2**62


class MemoryPool:
    """Best-fit suballocator over ``[0, capacity)`` with immediate coalescing.

    Free extents are kept sorted by offset. Requests are rounded up to
    ``alignment``; ties between equally good holes go to the lowest offset.
    """

    def __init__(self, capacity: int | None, alignment: int = ALIGNMENT, trace: bool = False,
                 script: Sequence[int] | None = None):
        """``script`` optionally fixes the offset of the k-th allocation (see
        ``plan_placement``)."""
        self.capacity = UNBOUNDED if capacity is None else int(capacity)
        if self.capacity < 0:
            raise ValueError("pool capacity must be non-negative")
        self.alignment = alignment
        # a zero-capacity pool has no holes at all; every request fails
        self._offsets: list[int] = [0] if self.capacity else []
        self._lengths: list[int] = [self.capacity] if self.capacity else []
        self.live: dict[int, Allocation] = {}
        self._freed: set[int] = set()
        self._next_id = 0
        self.current_bytes = 0
        self.high_water_bytes = 0
        self.padding_bytes = 0
        self.trace: list[tuple] | None = [] if trace else None
        self._script = script
        self._n_allocs = 0

    @property
    def free_extents(self) -> list[tuple[int, int]]:
        return list(zip(self._offsets, self._lengths))

    @property
    def free_bytes(self) -> int:
        return sum(self._lengths)

    def alloc(self, nbytes: int, tag: str = "", now: int = 0) -> int:
        if nbytes <= 0:
            raise ValueError(f"allocation size must be positive, got {nbytes}")
        size = align_up(nbytes, self.alignment)
        k = self._n_allocs
        self._n_allocs += 1
        if self._script is not None and k < len(self._script):
            offset = self._script[k]
            self._carve(offset, size)
            return self._record(offset, size, nbytes, tag, now)
        best = -1
        best_len = 0
        for i, length in enumerate(self._lengths):
            if length >= size and (best < 0 or length < best_len):
                best, best_len = i, length
                if length == size:
                    break
        if best < 0:
            raise PoolOOM(size, self.free_bytes, max(self._lengths, default=0), tag)
        offset = self._offsets[best]
        if best_len == size:
            del self._offsets[best]
            del self._lengths[best]
        else:
            self._offsets[best] = offset + size
            self._lengths[best] = best_len - size
        return self._record(offset, size, nbytes, tag, now)

    def _carve(self, offset: int, size: int) -> None:
        i = bisect.bisect_right(self._offsets, offset) - 1
        if i < 0 or offset + size > self._offsets[i] + self._lengths[i]:
            raise PoolError(f"extent [{offset}, {offset + size}) is not free")
        start, length = self._offsets[i], self._lengths[i]
        del self._offsets[i]
        del self._lengths[i]
        tail = start + length - (offset + size)
        if tail:
            self._offsets.insert(i, offset + size)
            self._lengths.insert(i, tail)
        if offset > start:
            self._offsets.insert(i, start)
            self._lengths.insert(i, offset - start)

    def _record(self, offset: int, size: int, nbytes: int, tag: str, now: int) -> int:
        aid = self._next_id
        self._next_id += 1
        self.live[aid] = Allocation(offset, size, nbytes, tag)
        self.current_bytes += size
        self.padding_bytes += size - nbytes
        if self.current_bytes > self.high_water_bytes:
            self.high_water_bytes = self.current_bytes
        if self.trace is not None:
            self.trace.append((now, "alloc", tag, offset, size, self.current_bytes, self.high_water_bytes))
        return aid

    def free(self, aid: int, now: int = 0) -> None:
        a = self.live.pop(aid, None)
        if a is None:
            if aid in self._freed:
                raise DoubleFree(f"allocation {aid} was already freed")
            raise UnknownAllocation(f"unknown allocation id {aid}")
        self._freed.add(aid)
        self.current_bytes -= a.length
        self.padding_bytes -= a.length - a.requested
        i = bisect.bisect_left(self._offsets, a.offset)
        start, length = a.offset, a.length
        if i < len(self._offsets) and self._offsets[i] == start + length:
            length += self._lengths[i]
            del self._offsets[i]
            del self._lengths[i]
        if i > 0 and self._offsets[i - 1] + self._lengths[i - 1] == start:
            self._lengths[i - 1] += length
        else:
            self._offsets.insert(i, start)
            self._lengths.insert(i, length)
        if self.trace is not None:
            self.trace.append((now, "free", a.tag, a.offset, a.length, self.current_bytes, self.high_water_bytes))

    def stats(self) -> PoolStats:
        return PoolStats(self.current_bytes, self.high_water_bytes, len(self.live), max(self._lengths, default=0))

    def check_invariants(self) -> list[str]:
        """Return every violated structural invariant (empty when sound)."""
        problems = []
        live = sorted((a.offset, a.offset + a.length, aid) for aid, a in self.live.items())
        free = [(o, o + l) for o, l in zip(self._offsets, self._lengths)]
        for (s0, e0, a0), (s1, e1, a1) in zip(live, live[1:]):
            if s1 < e0:
                problems.append(f"live allocations {a0} and {a1} overlap")
        for s, e, aid in live:
            if s < 0 or e > self.capacity:
                problems.append(f"allocation {aid} lies outside the pool")
        for (s0, e0), (s1, e1) in zip(free, free[1:]):
            if s1 <= e0:
                problems.append(f"free extents at {s0} and {s1} overlap or were not coalesced")
        spans = sorted([(s, e) for s, e, _ in live] + free)
        for (s0, e0), (s1, e1) in zip(spans, spans[1:]):
            if s1 < e0:
                problems.append(f"free extent at {s1} overlaps a live allocation")
        total = sum(a.length for a in self.live.values()) + sum(self._lengths)
        if total != self.capacity:
            problems.append(f"conservation broken: live+free={total} != capacity={self.capacity}")
        if sum(a.length for a in self.live.values()) != self.current_bytes:
            problems.append("current_bytes disagrees with the live ledger")
        if sum(a.length - a.requested for a in self.live.values()) != self.padding_bytes:
            problems.append("padding ledger disagrees with live allocations")
        if self.high_water_bytes < self.current_bytes:
            problems.append("high-water mark below current usage")
        return problems


@dataclass
class HostLedger:
    """Pinned host copies of offloaded feature maps, by buffer id."""

    pinned: dict[int, int] = field(default_factory=dict)
    current_bytes: int = 0
    peak_bytes: int = 0

    def add(self, buffer_id: int, nbytes: int) -> None:
        if buffer_id in self.pinned:
            raise PoolError(f"buffer {buffer_id} already resides in host memory")
        self.pinned[buffer_id] = nbytes
        self.current_bytes += nbytes
        self.peak_bytes = max(self.peak_bytes, self.current_bytes)

    def remove(self, buffer_id: int) -> int:
        nbytes = self.pinned.pop(buffer_id)
        self.current_bytes -= nbytes
        return nbytes


def _candidates(offsets: list[int], lengths: list[int], size: int) -> list[int]:
    """Offsets at which ``size`` bytes could go: best-fit hole first, each
    hole's low end before its high end."""
    holes = sorted((l, o) for o, l in zip(offsets, lengths) if l >= size)
    out = []
    for length, off in holes:
        out.append(off)
        if length > size:
            out.append(off + length - size)
    return out


def plan_placement(ops: Sequence[tuple[str, int]], capacity: int, alignment: int = ALIGNMENT,
                   budget: int = 2_000) -> list[int] | None:
    """Offline placement for a known allocation sequence.

    ``ops`` is a list of ``("alloc", nbytes)`` and ``("free", k)`` where ``k``
    is the index of the allocation being freed (counting allocs only).
    Depth-first search that always tries best fit first and backtracks on a
    failed request, giving up after ``budget`` failures. Returns the offset
    of every allocation, or None when no layout was found (always the case
    if live bytes ever exceed the capacity).
    """
    n_alloc = sum(1 for op, _ in ops if op == "alloc")
    chosen = [0] * n_alloc
    sizes = [0] * n_alloc
    live = k = 0
    for op, arg in ops:
        if op == "alloc":
            sizes[k] = align_up(arg, alignment)
            live += sizes[k]
            k += 1
            if live > capacity:
                return None
        else:
            live -= sizes[arg]
    offsets, lengths = [0], [int(capacity)]
    stack: list[tuple] = []
    i = k = 0
    failures = 0

    def take(off: int, size: int) -> None:
        j = bisect.bisect_right(offsets, off) - 1
        start, length = offsets[j], lengths[j]
        del offsets[j], lengths[j]
        if start + length > off + size:
            offsets.insert(j, off + size)
            lengths.insert(j, start + length - off - size)
        if off > start:
            offsets.insert(j, start)
            lengths.insert(j, off - start)

    def give(off: int, size: int) -> None:
        j = bisect.bisect_left(offsets, off)
        length = size
        if j < len(offsets) and offsets[j] == off + size:
            length += lengths[j]
            del offsets[j], lengths[j]
        if j > 0 and offsets[j - 1] + lengths[j - 1] == off:
            lengths[j - 1] += length
        else:
            offsets.insert(j, off)
            lengths.insert(j, length)

    while i < len(ops):
        op, arg = ops[i]
        if op == "free":
            give(chosen[arg], sizes[arg])
            i += 1
            continue
        size = align_up(arg, alignment)
        cands = _candidates(offsets, lengths, size)
        if cands:
            if len(cands) > 1:
                stack.append([i, k, cands, 0, offsets[:], lengths[:]])
            sizes[k], chosen[k] = size, cands[0]
            take(cands[0], size)
            i, k = i + 1, k + 1
            continue
        failures += 1
        while stack and stack[-1][3] + 1 >= len(stack[-1][2]):
            stack.pop()
        if not stack or failures > budget:
            return None
        frame = stack[-1]
        frame[3] += 1
        i, k, cands = frame[0], frame[1], frame[2]
        offsets[:], lengths[:] = frame[4][:], frame[5][:]
        size = align_up(ops[i][1], alignment)
        sizes[k], chosen[k] = size, cands[frame[3]]
        take(chosen[k], size)
        i, k = i + 1, k + 1
    return chosen
