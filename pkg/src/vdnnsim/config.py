"""Experiment configuration: INI files with [network] [device] [link] [policy]
sections, capacity strings, and network loading (presets or layer files)."""

from __future__ import annotations

import configparser
import json
import os
import re
from dataclasses import dataclass, replace
from pathlib import Path

from .costmodel import DEVICES, LINKS, DeviceProfile, LinkProfile
from .netgraph import GraphError, NetworkGraph, build_preset, graph_from_dict, parse_layer_lines

ENV_DIR = "VDNN_SIM_EXPERIMENTS"
POLICIES = ("baseline", "vdnn-all", "vdnn-conv", "vdnn-dyn", "decision-file")
ALGO_MODES = {"perf": "PERF_OPTIMAL", "performance": "PERF_OPTIMAL", "perf_optimal": "PERF_OPTIMAL",
              "mem": "MEMORY_OPTIMAL", "memory": "MEMORY_OPTIMAL", "memory_optimal": "MEMORY_OPTIMAL"}
POLICY_KINDS = {"baseline": "BASELINE", "vdnn-all": "VDNN_ALL", "vdnn-conv": "VDNN_CONV"}

_UNITS = {"": 1, "b": 1, "k": 2**10, "kb": 2**10, "kib": 2**10, "m": 2**20, "mb": 2**20, "mib": 2**20,
          "g": 2**30, "gb": 2**30, "gib": 2**30, "t": 2**40, "tb": 2**40, "tib": 2**40}


class ConfigError(ValueError):
    pass


def parse_capacity(text: str | int | None) -> int | None:
    """``"12GiB"``, ``"512MB"``, ``"1048576"`` or ``"inf"``. Binary units are
    used for both spellings (12GB is 12 * 2**30 bytes). None and ``inf``
    mean an unbounded pool."""
    if text is None or isinstance(text, int):
        return text
    s = str(text).strip().lower().replace("_", "")
    if s in ("inf", "infinite", "unbounded", "none", "oracle"):
        return None
    m = re.fullmatch(r"([0-9]*\.?[0-9]+(?:e[0-9]+)?)\s*([a-z]*)", s)
    if not m or m.group(2) not in _UNITS:
        raise ConfigError(f"cannot parse capacity {text!r}; use e.g. 12GiB, 512MB, 1048576 or inf")
    value = float(m.group(1)) * _UNITS[m.group(2)]
    if value < 0:
        raise ConfigError("capacity must be non-negative")
    return int(value)


def format_bytes(n: int | float | None) -> str:
    if n is None:
        return "inf"
    for unit, scale in (("GiB", 2**30), ("MiB", 2**20), ("KiB", 2**10)):
        if abs(n) >= scale:
            return f"{n / scale:.3f} {unit}"
    return f"{int(n)} B"


def normalize_algo_mode(mode: str) -> str:
    key = mode.strip().lower()
    if key in ALGO_MODES:
        return ALGO_MODES[key]
    if mode in ALGO_MODES.values():
        return mode
    raise ConfigError(f"unknown algo mode {mode!r}; use perf or mem")


@dataclass(frozen=True)
class ExperimentConfig:
    network: str = "vgg16"
    batch: int = 256
    variant: str = "fast"
    device: DeviceProfile = DEVICES["titanx"]
    link: LinkProfile = LINKS["pcie3"]
    # None here means "use the device capacity"; use unbounded=True for an infinite pool
    capacity: int | None = None
    unbounded: bool = False
    policy: str = "vdnn-dyn"
    algo_mode: str = "PERF_OPTIMAL"
    decision_file: str | None = None
    out_dir: str | None = None
    fmt: str = "table"
    seed: int = 0
    trace_pool: bool = False

    def __post_init__(self):
        if self.policy not in POLICIES:
            raise ConfigError(f"unknown policy {self.policy!r}; choose from {', '.join(POLICIES)}")
        if self.policy == "decision-file" and not self.decision_file:
            raise ConfigError("policy decision-file needs a decision file")
        if self.batch < 1:
            raise ConfigError(f"batch must be positive, got {self.batch}")
        if self.fmt not in ("table", "csv", "json"):
            raise ConfigError(f"unknown format {self.fmt!r}")
        object.__setattr__(self, "algo_mode", normalize_algo_mode(self.algo_mode))

    @property
    def pool_capacity(self) -> int | None:
        if self.unbounded:
            return None
        return self.device.mem_capacity if self.capacity is None else self.capacity

    def with_capacity(self, text: str | int | None) -> "ExperimentConfig":
        cap = parse_capacity(text)
        return replace(self, capacity=cap, unbounded=cap is None)


def experiments_dir() -> Path:
    env = os.environ.get(ENV_DIR)
    if env:
        return Path(env)
    return Path.cwd() / "experiments"


def resolve_config_path(name: str) -> Path:
    p = Path(name)
    if p.exists():
        return p
    for cand in (experiments_dir() / name, experiments_dir() / f"{name}.ini"):
        if cand.exists():
            return cand
    raise ConfigError(f"config {name!r} not found (looked in the working directory and {experiments_dir()})")


def _number(section: configparser.SectionProxy, key: str, kind=float):
    try:
        return kind(float(section[key])) if kind is int else kind(section[key])
    except ValueError:
        raise ConfigError(f"[{section.name}] {key} must be a number, got {section[key]!r}") from None


def load_config(path: str | Path) -> ExperimentConfig:
    path = resolve_config_path(str(path))
    cp = configparser.ConfigParser()
    try:
        cp.read(path)
    except configparser.Error as exc:
        raise ConfigError(f"{path}: {exc}") from None
    known = {"network", "device", "link", "policy"}
    unknown = set(cp.sections()) - known
    if unknown:
        raise ConfigError(f"{path}: unknown sections {sorted(unknown)}; expected {sorted(known)}")
    kw: dict = {}
    if cp.has_section("network"):
        net = cp["network"]
        if "layers" in net:
            layers = Path(net["layers"])
            kw["network"] = str(layers if layers.is_absolute() else path.parent / layers)
        elif "name" in net:
            kw["network"] = net["name"]
        if "batch" in net:
            kw["batch"] = _number(net, "batch", int)
        if "variant" in net:
            kw["variant"] = net["variant"]
    if cp.has_section("device"):
        sec = cp["device"]
        base = DEVICES.get(sec.get("preset", "titanx"))
        if base is None:
            raise ConfigError(f"unknown device preset {sec['preset']!r}; known: {', '.join(DEVICES)}")
        fields = {k: _number(sec, k) for k in ("peak_flops", "dram_bw", "compute_efficiency") if k in sec}
        if "mem_capacity" in sec:
            cap = parse_capacity(sec["mem_capacity"])
            if cap is None:
                raise ConfigError("[device] mem_capacity must be finite; use [policy] capacity = inf")
            fields["mem_capacity"] = cap
        try:
            kw["device"] = replace(base, **fields)
        except ValueError as exc:
            raise ConfigError(f"{path}: [device] {exc}") from None
    if cp.has_section("link"):
        sec = cp["link"]
        base = LINKS.get(sec.get("preset", "pcie3"))
        if base is None:
            raise ConfigError(f"unknown link preset {sec['preset']!r}; known: {', '.join(LINKS)}")
        fields = {k: _number(sec, k) for k in ("effective_bw", "max_bw", "fixed_launch_overhead") if k in sec}
        try:
            kw["link"] = replace(base, **fields)
        except ValueError as exc:
            raise ConfigError(f"{path}: [link] {exc}") from None
    if cp.has_section("policy"):
        sec = cp["policy"]
        if "policy" in sec:
            kw["policy"] = sec["policy"]
        if "algo_mode" in sec:
            kw["algo_mode"] = sec["algo_mode"]
        if "decision" in sec:
            kw["decision_file"] = str(path.parent / sec["decision"])
        if "capacity" in sec:
            cap = parse_capacity(sec["capacity"])
            kw["capacity"] = cap
            kw["unbounded"] = cap is None
    try:
        return ExperimentConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def load_network(spec: str, batch: int, variant: str = "fast") -> NetworkGraph:
    """A preset name, a JSON graph dump, or a layer-line file."""
    p = Path(spec)
    try:
        if p.suffix == ".json" and p.exists():
            return graph_from_dict(json.loads(p.read_text()))
        if p.exists():
            return parse_layer_lines(p.read_text(), batch=batch)
        return build_preset(spec, batch, variant)
    except GraphError as exc:
        raise ConfigError(str(exc)) from None
