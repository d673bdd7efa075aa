"""Analytic compute, workspace and transfer cost model with device/link presets."""

from __future__ import annotations

import enum
from dataclasses import dataclass, field, replace
from typing import Mapping

from .netgraph import LayerKind, NetworkGraph

GiB = 2**30


class WrongLayerKind(ValueError):
    pass


class Direction(str, enum.Enum):
    FWD = "FWD"
    BWD = "BWD"


class ConvAlgo(str, enum.Enum):
    """Ordered slowest/leanest to fastest/hungriest."""

    IMPLICIT_GEMM = "IMPLICIT_GEMM"
    GEMM_WS = "GEMM_WS"
    FFT = "FFT"


ALGO_ORDER = (ConvAlgo.IMPLICIT_GEMM, ConvAlgo.GEMM_WS, ConvAlgo.FFT)
DEFAULT_SPEED = {ConvAlgo.IMPLICIT_GEMM: 1.0, ConvAlgo.GEMM_WS: 0.8, ConvAlgo.FFT: 0.6}


@dataclass(frozen=True)
class DeviceProfile:
    peak_flops: float
    dram_bw: float
    mem_capacity: int
    compute_efficiency: float = 0.5
    name: str = ""

    def __post_init__(self):
        if self.peak_flops <= 0 or self.dram_bw <= 0 or self.mem_capacity <= 0:
            raise ValueError(f"device parameters must be positive: {self}")
        if not 0 < self.compute_efficiency <= 1:
            raise ValueError(f"compute_efficiency must lie in (0, 1], got {self.compute_efficiency}")


@dataclass(frozen=True)
class LinkProfile:
    effective_bw: float
    fixed_launch_overhead: float = 0.0
    # nominal peak; defaults to the effective bandwidth
    max_bw: float | None = None
    name: str = ""

    def __post_init__(self):
        if self.effective_bw <= 0:
            raise ValueError("effective_bw must be positive")
        if self.fixed_launch_overhead < 0:
            raise ValueError("fixed_launch_overhead must be non-negative")
        if self.max_bw is None:
            object.__setattr__(self, "max_bw", self.effective_bw)


DEVICES = {
    "titanx": DeviceProfile(peak_flops=7e12, dram_bw=336e9, mem_capacity=12 * GiB, name="titanx"),
}

LINKS = {
    "pcie3": LinkProfile(effective_bw=12.8e9, max_bw=16e9, name="pcie3"),
    "page_migration": LinkProfile(effective_bw=200e6, name="page_migration"),
}


def transfer_latency(nbytes: int, link: LinkProfile) -> float:
    if nbytes < 0:
        raise ValueError("transfer size must be non-negative")
    return link.fixed_launch_overhead + nbytes / link.effective_bw


def offload_interference_bound(link: LinkProfile, dev: DeviceProfile) -> float:
    """Worst-case slowdown if transfers steal DRAM bandwidth from a fully
    bandwidth-bound kernel."""
    return link.max_bw / dev.dram_bw


def _next_pow2(v: int) -> int:
    return 1 << (v - 1).bit_length()


@dataclass(frozen=True)
class CostModel:
    """Per-layer latency and workspace rules bound to one device and link.

    ``latency_overrides`` maps ``(layer_id, "FWD" | "BWD")`` to seconds and
    pins that layer's time regardless of algorithm.
    """

    device: DeviceProfile = DEVICES["titanx"]
    link: LinkProfile = LINKS["pcie3"]
    elem_size: int = 4
    speed_factors: Mapping[ConvAlgo, float] = field(default_factory=lambda: dict(DEFAULT_SPEED))
    bwd_ratio: float = 2.0
    latency_overrides: Mapping[tuple[int, str], float] = field(default_factory=dict)

    def with_overrides(self, **kw) -> "CostModel":
        return replace(self, **kw)

    # -- workspace -------------------------------------------------------

    def conv_workspace(self, graph: NetworkGraph, lid: int, algo: ConvAlgo) -> int:
        layer = graph[lid]
        if layer.kind is not LayerKind.CONV:
            raise WrongLayerKind(f"layer {lid} is {layer.kind.value}, workspace is defined for CONV only")
        algo = ConvAlgo(algo)
        if algo is ConvAlgo.IMPLICIT_GEMM:
            return 0
        x = graph.input_shape(lid)
        y = graph.shape(lid)
        k = layer.conv.kernel
        if algo is ConvAlgo.GEMM_WS:
            # im2col column matrix
            return k * k * x.c * y.h * y.w * y.n * self.elem_size
        c_max = max(x.c, y.c)
        return 2 * c_max * _next_pow2(x.h) * _next_pow2(x.w) * x.n * self.elem_size

    def applicable(self, graph: NetworkGraph, lid: int, algo: ConvAlgo) -> bool:
        if ConvAlgo(algo) is ConvAlgo.FFT:
            return graph[lid].conv.stride == 1
        return True

    def algo_ladder(self, graph: NetworkGraph, lid: int) -> list[ConvAlgo]:
        """Applicable algorithms from fastest to IMPLICIT_GEMM, skipping any that
        is both slower and no leaner than a faster one."""
        ladder: list[ConvAlgo] = []
        for algo in sorted(ALGO_ORDER, key=lambda a: self.speed_factors[a]):
            if not self.applicable(graph, lid, algo):
                continue
            ws = self.conv_workspace(graph, lid, algo)
            if ladder and algo is not ConvAlgo.IMPLICIT_GEMM:
                if ws >= self.conv_workspace(graph, lid, ladder[-1]):
                    continue
            ladder.append(algo)
        if ladder[-1] is not ConvAlgo.IMPLICIT_GEMM:
            ladder.append(ConvAlgo.IMPLICIT_GEMM)
        return ladder

    def fastest_algo(self, graph: NetworkGraph, lid: int) -> ConvAlgo:
        return self.algo_ladder(graph, lid)[0]

    # -- latency ---------------------------------------------------------

    def layer_flops(self, graph: NetworkGraph, lid: int) -> float:
        """Forward FLOPs."""
        layer = graph[lid]
        kind = layer.kind
        if kind in (LayerKind.INPUT, LayerKind.LOSS):
            return 0.0
        y = graph.shape(lid)
        if kind is LayerKind.CONV:
            x = graph.input_shape(lid)
            k = layer.conv.kernel
            return 2.0 * k * k * x.c * y.c * y.h * y.w * y.n
        if kind is LayerKind.FC:
            x = graph.input_shape(lid)
            return 2.0 * (x.c * x.h * x.w) * y.c * y.n
        if kind is LayerKind.POOL:
            return float(layer.pool.window ** 2 * y.numel)
        return float(y.numel)

    def layer_bytes_moved(self, graph: NetworkGraph, lid: int) -> int:
        layer = graph[lid]
        if layer.kind in (LayerKind.INPUT, LayerKind.LOSS):
            return 0
        moved = (graph.input_shape(lid).numel + graph.shape(lid).numel) * self.elem_size
        if layer.kind is LayerKind.FC:
            x = graph.input_shape(lid)
            moved += (x.c * x.h * x.w + 1) * layer.fc.out_features * self.elem_size
        return moved

    def layer_latency(self, graph: NetworkGraph, lid: int, direction: Direction | str,
                      algo: ConvAlgo | None = None) -> float:
        direction = Direction(direction)
        pinned = self.latency_overrides.get((lid, direction.value))
        if pinned is not None:
            return float(pinned)
        kind = graph[lid].kind
        if kind in (LayerKind.INPUT, LayerKind.LOSS):
            return 0.0
        dev = self.device
        scale = self.bwd_ratio if direction is Direction.BWD else 1.0
        compute = self.layer_flops(graph, lid) / (dev.compute_efficiency * dev.peak_flops)
        if kind is LayerKind.CONV:
            factor = self.speed_factors[ConvAlgo(algo or ConvAlgo.IMPLICIT_GEMM)]
            return compute * scale * factor
        bandwidth = self.layer_bytes_moved(graph, lid) / dev.dram_bw
        return max(compute, bandwidth) * scale

    def transfer_latency(self, nbytes: int) -> float:
        return transfer_latency(nbytes, self.link)
