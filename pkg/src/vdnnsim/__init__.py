"""Deterministic simulator of virtualized DNN-training memory management:
layer graphs, a GPU memory pool, a latency model, a two-queue event
simulator, and offload/prefetch policies."""

from .costmodel import DEVICES, LINKS, ConvAlgo, CostModel, DeviceProfile, LinkProfile
from .memmodel import FootprintReport, MemoryPool, PoolOOM, baseline_footprint
from .netgraph import LayerBuilder, LayerKind, NetworkGraph, build_preset, extend_vgg
from .policy import (AlgoMode, PolicyDecision, PolicyKind, Untrainable, dynamic_select, find_prefetch_layer,
                     greedy_downgrade, static_decision)
from .simcore import RunReport, Verdict, simulate

__version__ = "0.1.0"

__all__ = [
    "AlgoMode", "ConvAlgo", "CostModel", "DEVICES", "DeviceProfile", "FootprintReport", "LINKS", "LayerBuilder",
    "LayerKind", "LinkProfile", "MemoryPool", "NetworkGraph", "PolicyDecision", "PolicyKind", "PoolOOM",
    "RunReport", "Untrainable", "Verdict", "baseline_footprint", "build_preset", "dynamic_select", "extend_vgg",
    "find_prefetch_layer", "greedy_downgrade", "simulate", "static_decision",
]
