"""Command-line front end.

Every subcommand is a thin wrapper over a ``cmd_*`` function that returns
plain data, so the same numbers are available to tests and scripts without
going through click. Exit codes: 0 when the run passes, 2 for OOM or an
untrainable network (and for fuzz violations), 1 for configuration and usage
errors.
"""

from __future__ import annotations

import json
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import click

from . import report as rpt
from .config import (POLICIES, POLICY_KINDS, ConfigError, ExperimentConfig, format_bytes, load_config,
                     load_network)
from .costmodel import DEVICES, LINKS, CostModel
from .memmodel import FootprintReport, baseline_footprint, tensor_plan
from .netgraph import GraphError, NetworkGraph, graph_to_dict
from .policy import (AlgoMode, PolicyDecision, PolicyKind, ProfilePassResult, Untrainable, algos_for,
                     dynamic_select, static_decision)
from .simcore import InvalidDecision, RunReport, simulate

EXIT_OK, EXIT_CONFIG, EXIT_OOM = 0, 1, 2
SWEEP_AXES = ("policy", "batch", "depth", "capacity")
SWEEP_DEFAULTS = {
    "policy": ("baseline", "vdnn-all", "vdnn-conv", "vdnn-dyn"),
    "batch": ("32", "64", "128", "256"),
    "depth": ("16", "116", "216", "316", "416"),
    "capacity": ("2GiB", "4GiB", "6GiB", "8GiB", "12GiB", "inf"),
}
SWEEP_COLUMNS = ("label", "verdict", "max_mem_bytes", "avg_mem_bytes", "footprint_bytes", "savings_avg_pct",
                 "savings_max_pct", "offload_traffic_bytes", "host_fraction", "total_seconds",
                 "oracle_seconds", "slowdown_pct")


def cost_for(cfg: ExperimentConfig) -> CostModel:
    return CostModel(device=cfg.device, link=cfg.link)


def graph_for(cfg: ExperimentConfig) -> NetworkGraph:
    return load_network(cfg.network, cfg.batch, cfg.variant)


# -- library layer -------------------------------------------------------------

def cmd_footprint(cfg: ExperimentConfig, graph: NetworkGraph | None = None) -> FootprintReport:
    graph = graph or graph_for(cfg)
    cost = cost_for(cfg)
    return baseline_footprint(graph, algos_for(graph, cfg.algo_mode, cost), cost)


def cmd_oracle(cfg: ExperimentConfig, graph: NetworkGraph | None = None) -> RunReport:
    """Unbounded pool, no offloading, fastest algorithms."""
    graph = graph or graph_for(cfg)
    cost = cost_for(cfg)
    d = replace(static_decision(PolicyKind.BASELINE, AlgoMode.PERF_OPTIMAL, graph, cost), label="oracle")
    return simulate(graph, d, cost, None)


@dataclass
class SimOutcome:
    report: RunReport
    decision: PolicyDecision
    oracle: RunReport
    footprint: FootprintReport
    passes: list[ProfilePassResult] = field(default_factory=list)
    untrainable: bool = False

    @property
    def passed(self) -> bool:
        return self.report.passed and not self.untrainable

    @property
    def verdict(self) -> str:
        return "UNTRAINABLE" if self.untrainable else str(self.report.verdict)

    @property
    def slowdown(self) -> float | None:
        if not self.passed or not self.oracle.total_ns:
            return None
        return self.report.total_ns / self.oracle.total_ns - 1.0

    def savings(self, which: str = "avg") -> float | None:
        total = self.footprint.total_bytes
        if not total or not self.passed:
            return None
        mem = self.report.avg_mem_bytes if which == "avg" else self.report.max_mem_bytes
        return 1.0 - mem / total

    def summary(self) -> dict:
        out = self.report.summary()
        out.update({
            "verdict": self.verdict,
            "passed": self.passed,
            "label": self.decision.label,
            "footprint_bytes": self.footprint.total_bytes,
            "savings_avg": self.savings("avg"),
            "savings_max": self.savings("max"),
            "oracle_ns": self.oracle.total_ns,
            "slowdown": self.slowdown,
        })
        return out


def choose_decision(cfg: ExperimentConfig, graph: NetworkGraph, cost: CostModel
                    ) -> tuple[PolicyDecision, list[ProfilePassResult]]:
    """Raises Untrainable when the dynamic selector finds nothing that fits."""
    if cfg.policy == "vdnn-dyn":
        return dynamic_select(graph, cfg.pool_capacity, cost)
    if cfg.policy == "decision-file":
        try:
            text = Path(cfg.decision_file).read_text()
        except OSError as exc:
            raise ConfigError(f"cannot read decision file: {exc}") from None
        try:
            return PolicyDecision.from_json(text), []
        except (KeyError, ValueError, TypeError) as exc:
            raise ConfigError(f"{cfg.decision_file}: malformed decision ({exc})") from None
    return static_decision(POLICY_KINDS[cfg.policy], cfg.algo_mode, graph, cost), []


def cmd_simulate(cfg: ExperimentConfig, graph: NetworkGraph | None = None) -> SimOutcome:
    graph = graph or graph_for(cfg)
    cost = cost_for(cfg)
    plan = tensor_plan(graph, cost.elem_size)
    footprint = baseline_footprint(graph, algos_for(graph, AlgoMode.PERF_OPTIMAL, cost), cost)
    oracle = cmd_oracle(cfg, graph)
    untrainable = False
    try:
        decision, passes = choose_decision(cfg, graph, cost)
    except Untrainable as exc:
        # report the trainability floor so the failure point is visible
        passes, untrainable = exc.passes, True
        decision = replace(static_decision(PolicyKind.VDNN_ALL, AlgoMode.MEMORY_OPTIMAL, graph, cost),
                           label="dyn:vdnn_all(m)")
    try:
        rep = simulate(graph, decision, cost, cfg.pool_capacity, trace_pool=cfg.trace_pool, plan=plan)
    except InvalidDecision as exc:
        raise ConfigError(f"decision does not match the network: {exc}") from None
    return SimOutcome(rep, decision, oracle, footprint, passes, untrainable)


def sweep_points(cfg: ExperimentConfig, axis: str, values: Sequence[str]) -> list[tuple[str, ExperimentConfig]]:
    if axis not in SWEEP_AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; choose from {', '.join(SWEEP_AXES)}")
    points = []
    for v in values:
        v = v.strip()
        if axis == "policy":
            if v not in POLICIES or v == "decision-file":
                raise ConfigError(f"sweep policy {v!r} must be one of baseline, vdnn-all, vdnn-conv, vdnn-dyn")
            points.append((v, replace(cfg, policy=v)))
        elif axis in ("batch", "depth"):
            if not v.isdigit() or int(v) < 1:
                raise ConfigError(f"{axis} values must be positive integers, got {v!r}")
            if axis == "batch":
                points.append((v, replace(cfg, batch=int(v))))
            else:
                points.append((v, replace(cfg, network=f"vgg{int(v)}")))
        else:
            points.append((v, cfg.with_capacity(v)))
    return points


def cmd_sweep(cfg: ExperimentConfig, axis: str, values: Sequence[str] | None = None) -> list[dict]:
    """One row per point; failures stay in their row and the sweep goes on."""
    rows = []
    for value, point in sweep_points(cfg, axis, values or SWEEP_DEFAULTS[axis]):
        row: dict = {axis: value}
        try:
            out = cmd_simulate(point)
        except ConfigError as exc:
            row.update(label=point.policy, verdict=f"ERROR: {exc}")
            rows.append(row)
            continue
        s = out.summary()
        row.update({
            "label": out.decision.label,
            "verdict": out.verdict,
            "max_mem_bytes": s["max_mem_bytes"],
            "avg_mem_bytes": s["avg_mem_bytes"],
            "footprint_bytes": s["footprint_bytes"],
            "savings_avg_pct": None if s["savings_avg"] is None else 100 * s["savings_avg"],
            "savings_max_pct": None if s["savings_max"] is None else 100 * s["savings_max"],
            "offload_traffic_bytes": s["offload_traffic_bytes"],
            "host_fraction": s["host_fraction"],
            "total_seconds": s["total_seconds"],
            "oracle_seconds": out.oracle.total_seconds,
            "slowdown_pct": None if out.slowdown is None else 100 * out.slowdown,
        })
        rows.append(row)
    return rows


# -- click layer ---------------------------------------------------------------

def _common(f):
    opts = [
        click.argument("network_arg", metavar="[NETWORK]", required=False),
        click.option("--network", "network", help="Preset name (vgg16, alexnet, vgg416, ...), graph JSON or layer file."),
        click.option("--batch", type=int, help="Batch size."),
        click.option("--variant", help="Preset variant (overfeat: fast or accurate)."),
        click.option("--policy", type=click.Choice(POLICIES), help="Transfer policy."),
        click.option("--algo-mode", help="Convolution algorithms: perf or mem."),
        click.option("--capacity", help="Pool capacity, e.g. 12GiB, 512MB or inf."),
        click.option("--device", type=click.Choice(sorted(DEVICES)), help="Device preset."),
        click.option("--link", type=click.Choice(sorted(LINKS)), help="Host link preset."),
        click.option("--out", "out_dir", type=click.Path(file_okay=False), help="Directory for CSV/JSON/PNG output."),
        click.option("--format", "fmt", type=click.Choice(("table", "csv", "json")), help="Stdout format."),
        click.option("--trace-pool", is_flag=True, default=None, help="Record every pool alloc/free."),
        click.option("--decision", "decision_file", type=click.Path(dir_okay=False),
                     help="Decision JSON (implies --policy decision-file)."),
        click.option("--config", "config_path", help="INI experiment config (name or path)."),
    ]
    for o in reversed(opts):
        f = o(f)
    return f


def build_config(config_path=None, network_arg=None, network=None, batch=None, variant=None, policy=None,
                 algo_mode=None, capacity=None, device=None, link=None, out_dir=None, fmt=None, trace_pool=None,
                 decision_file=None, seed=None) -> ExperimentConfig:
    cfg = load_config(config_path) if config_path else ExperimentConfig()
    if network_arg and network and network_arg != network:
        raise ConfigError(f"network given twice ({network_arg!r} and --network {network!r})")
    kw = {}
    if network_arg or network:
        kw["network"] = network_arg or network
    for key, val in (("batch", batch), ("variant", variant), ("algo_mode", algo_mode), ("out_dir", out_dir),
                     ("fmt", fmt), ("trace_pool", trace_pool), ("seed", seed)):
        if val is not None:
            kw[key] = val
    if device:
        kw["device"] = DEVICES[device]
    if link:
        kw["link"] = LINKS[link]
    if decision_file:
        kw["decision_file"] = decision_file
        kw["policy"] = policy or "decision-file"
    elif policy:
        kw["policy"] = policy
    try:
        cfg = replace(cfg, **kw)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if capacity is not None:
        cfg = cfg.with_capacity(capacity)
    return cfg


def _emit(rows: list[dict], fmt: str, columns=None) -> None:
    click.echo(rpt.render(rows, fmt, columns))


def _kv(pairs: list[tuple[str, object]], fmt: str, doc: dict) -> None:
    if fmt == "json":
        click.echo(json.dumps(doc, indent=2, default=str))
    elif fmt == "csv":
        click.echo(rpt.to_csv([doc]).rstrip("\n"))
    else:
        click.echo(rpt.format_table([{"metric": k, "value": v} for k, v in pairs]))


def _pct(x: float | None) -> str:
    return "n/a" if x is None else f"{100 * x:.1f}%"


@click.group(context_settings={"help_option_names": ["-h", "--help"]})
def cli():
    """Deterministic simulator of virtualized DNN-training memory management."""


@cli.command()
@_common
def footprint(**kw):
    """Baseline network-wide memory footprint and its breakdown."""
    cfg = build_config(**kw)
    graph = graph_for(cfg)
    fp = cmd_footprint(cfg, graph)
    doc = {"network": graph.name, "batch": cfg.batch, "algo_mode": cfg.algo_mode, **fp.as_dict()}
    pairs = [("network", f"{graph.name} (batch {cfg.batch}, {cfg.algo_mode.lower()})"),
             ("weights", format_bytes(fp.weights_bytes)),
             ("feature maps", format_bytes(fp.feature_maps_bytes)),
             ("gradient maps", format_bytes(fp.gradient_buffers_bytes)),
             ("workspace", format_bytes(fp.workspace_bytes)),
             ("total", format_bytes(fp.total_bytes)),
             ("feature-map fraction", f"{fp.feature_map_fraction:.3f}"),
             ("feature-extraction fraction", f"{fp.feature_extraction_fraction:.3f}")]
    _kv(pairs, cfg.fmt, doc)
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        rpt.write_json(out / "footprint.json", doc)
        rpt.plot_footprint(fp, out / "footprint.png", f"{graph.name} batch {cfg.batch}: "
                           f"{format_bytes(fp.total_bytes)}")
    return EXIT_OK


def _write_run(out: Path, prefix: str, rep: RunReport, capacity: int | None, extra: dict) -> None:
    rpt.write_csv(out / f"{prefix}timeline.csv", rpt.event_rows(rep))
    rpt.write_json(out / f"{prefix}report.json", {**rep.summary(), **extra})
    if rep.pool_trace is not None:
        rpt.write_csv(out / f"{prefix}pool_trace.csv", rpt.pool_trace_rows(rep))
    rpt.plot_run(rep, out / f"{prefix}memory.png", capacity)


@cli.command("simulate")
@_common
def simulate_cmd(**kw):
    """Run one training iteration under the selected policy."""
    cfg = build_config(**kw)
    o = cmd_simulate(cfg)
    s = o.summary()
    rep = o.report
    pairs = [("policy", o.decision.label), ("verdict", o.verdict),
             ("capacity", format_bytes(cfg.pool_capacity)),
             ("max memory", format_bytes(rep.max_mem_bytes)), ("avg memory", format_bytes(rep.avg_mem_bytes)),
             ("baseline footprint", format_bytes(o.footprint.total_bytes)),
             ("savings (avg)", _pct(o.savings("avg"))), ("savings (max)", _pct(o.savings("max"))),
             ("offload traffic", format_bytes(rep.offload_traffic_bytes)),
             ("host fraction", f"{rep.host_fraction:.3f}"),
             ("time", f"{rep.total_seconds:.4f} s"), ("stall", f"{rep.stall_seconds:.4f} s"),
             ("oracle time", f"{o.oracle.total_seconds:.4f} s"), ("slowdown vs oracle", _pct(o.slowdown))]
    if rep.placement != "best-fit":
        pairs.append(("placement", rep.placement))
    _kv(pairs, cfg.fmt, s)
    if o.passes and cfg.fmt == "table":
        click.echo("")
        _emit([_pass_row(p) for p in o.passes], "table")
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        _write_run(out, "", rep, cfg.pool_capacity, s)
        rpt.write_json(out / "decision.json", o.decision.to_dict())
        if o.passes:
            rpt.write_csv(out / "profile.csv", [_pass_row(p) for p in o.passes])
    if not o.passed:
        click.echo(f"error: {o.verdict} under {o.decision.label}", err=True)
        return EXIT_OOM
    return EXIT_OK


def _pass_row(p: ProfilePassResult) -> dict:
    return {"phase": p.phase, "decision": p.label, "verdict": p.verdict,
            "time_s": p.total_seconds, "max_mem_bytes": p.max_mem_bytes}


@cli.command()
@_common
def oracle(**kw):
    """Unbounded device, fastest algorithms, no offloading."""
    cfg = build_config(**kw)
    rep = cmd_oracle(cfg)
    pairs = [("verdict", str(rep.verdict)), ("time", f"{rep.total_seconds:.4f} s"),
             ("max memory", format_bytes(rep.max_mem_bytes)), ("avg memory", format_bytes(rep.avg_mem_bytes))]
    _kv(pairs, cfg.fmt, rep.summary())
    if cfg.out_dir:
        _write_run(Path(cfg.out_dir), "oracle_", rep, None, {})
    return EXIT_OK


@cli.command()
@_common
@click.option("--axis", type=click.Choice(SWEEP_AXES), required=True, help="Parameter to vary.")
@click.option("--values", help="Comma-separated points (defaults depend on the axis).")
def sweep(axis, values, **kw):
    """Vary one parameter; one row per point. Exit 2 if any point fails."""
    cfg = build_config(**kw)
    rows = cmd_sweep(cfg, axis, values.split(",") if values else None)
    columns = (axis, *SWEEP_COLUMNS)
    if cfg.fmt == "table":
        shown = [{**r, "max_mem": format_bytes(r.get("max_mem_bytes")), "avg_mem": format_bytes(r.get("avg_mem_bytes")),
                  "footprint": format_bytes(r.get("footprint_bytes")),
                  "traffic": format_bytes(r.get("offload_traffic_bytes"))} for r in rows]
        _emit(shown, "table", (axis, "label", "verdict", "max_mem", "avg_mem", "footprint", "savings_avg_pct",
                               "traffic", "total_seconds", "slowdown_pct"))
    else:
        _emit(rows, cfg.fmt, columns)
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        rpt.write_csv(out / f"sweep_{axis}.csv", rows, columns)
        rpt.plot_sweep(rows, axis, out / f"sweep_{axis}.png",
                       cfg.pool_capacity if axis != "capacity" else None)
    return EXIT_OK if all(r.get("verdict") == "PASS" for r in rows) else EXIT_OOM


@cli.command("dump-graph")
@_common
def dump_graph(**kw):
    """Print the network as JSON (loadable again with --network file.json)."""
    cfg = build_config(**kw)
    text = json.dumps(graph_to_dict(graph_for(cfg)), indent=2)
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "graph.json").write_text(text + "\n")
    else:
        click.echo(text)
    return EXIT_OK


@cli.command()
@click.option("--seed", type=int, default=0, show_default=True)
@click.option("--trials", type=int, default=10_000, show_default=True)
@click.option("--out", "out_dir", type=click.Path(file_okay=False))
@click.option("--format", "fmt", type=click.Choice(("table", "csv", "json")), default="table")
def fuzz(seed, trials, out_dir, fmt):
    """Randomized invariant campaign over small graphs and capacities."""
    from .fuzz import run_campaign

    if trials < 1:
        raise ConfigError("--trials must be positive")
    res = run_campaign(seed=seed, trials=trials)
    doc = res.summary()
    _kv(list(doc.items()), fmt, doc)
    for trial, label, msg in (res.violations + res.pool_violations)[:20]:
        click.echo(f"trial {trial} {label}: {msg}", err=True)
    if out_dir:
        rpt.write_json(Path(out_dir) / "fuzz.json", {
            **doc, "violations": [list(v) for v in res.violations[:1000]],
            "pool_violations": [list(v) for v in res.pool_violations[:1000]]})
    return EXIT_OK if res.ok else EXIT_OOM


def main(argv: Sequence[str] | None = None) -> int:
    try:
        rc = cli.main(args=list(argv) if argv is not None else None, prog_name="vdnn-sim", standalone_mode=False)
    except click.exceptions.Exit as exc:
        return exc.exit_code
    except click.ClickException as exc:
        exc.show()
        return EXIT_CONFIG
    except click.exceptions.Abort:
        click.echo("aborted", err=True)
        return EXIT_CONFIG
    except (ConfigError, GraphError, InvalidDecision) as exc:
        click.echo(f"error: {exc}", err=True)
        return EXIT_CONFIG
    return rc if isinstance(rc, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
