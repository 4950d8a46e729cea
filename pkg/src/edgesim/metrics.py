"""Metric records, end-of-run aggregation, CSV and plot emission.

Capture is distributed (each client and the edge buffer their own per-tick
logs) and batched: nothing crosses the wire before END. The manager merges
the uploads, computes the aggregates reported by the platform, and writes
the normative CSV files plus standalone SVG plots.

CSV column order and headers are normative so determinism checks can diff
files byte-for-byte; floats are written with full round-trip precision.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field

from .core import mps_to_kph

TRAFFIC_COLUMNS = ["tick", "vehicle_id", "v", "deviation", "lane", "s", "control_source"]
TIMINGS_COLUMNS = ["tick", "client_id", "processing_ms", "network_ms", "barrier_ms"]
SAFETY_COLUMNS = ["tick", "kind", "id_a", "id_b", "value"]
EDGE_COLUMNS = ["generation_tick", "algorithm", "n_vehicles", "runtime_ms",
                "cluster_sizes", "expanded_nodes", "violations", "timeout",
                "infeasible_clusters"]
WORLD_COLUMNS = ["tick", "world_ms", "client_phase_ms"]


@dataclass
class StepTimings:
    tick: int
    client_id: int
    processing_ms: float
    network_ms: float
    barrier_ms: float

    @property
    def total_ms(self) -> float:
        return self.processing_ms + self.network_ms + self.barrier_ms


@dataclass
class TrafficRecord:
    tick: int
    vehicle_id: int
    v: float
    deviation: float
    lane: int
    s: float
    control_source: str


@dataclass
class SafetyRecord:
    tick: int
    kind: str          # headway | collision | lane | blockage
    id_a: int
    id_b: int          # -1 where not applicable
    value: float       # gap for headway, attempted lane for lane, else 0


@dataclass
class WorldStepRecord:
    tick: int
    world_ms: float
    client_phase_ms: float


@dataclass
class MetricsBundle:
    """Everything the manager holds after collection, pre-aggregation."""

    meta: dict = field(default_factory=dict)
    traffic: list = field(default_factory=list)
    timings: list = field(default_factory=list)
    safety: list = field(default_factory=list)
    edge: list = field(default_factory=list)
    world_steps: list = field(default_factory=list)
    client_counters: dict = field(default_factory=dict)  # client_id -> counters dict
    partial: bool = False


@dataclass
class RunSummary:
    meta: dict
    aggregates: dict
    bundle: MetricsBundle
    partial: bool = False


def _mean(values) -> float:
    values = list(values)
    return sum(values) / len(values) if values else 0.0


def _percentile(sorted_values, q: float) -> float:
    """Nearest-rank on a sorted list; 0 for empty input."""
    if not sorted_values:
        return 0.0
    idx = max(0, math.ceil(q / 100.0 * len(sorted_values)) - 1)
    return sorted_values[idx]


def aggregate(bundle: MetricsBundle, edge_period_ms: float = 200.0) -> RunSummary:
    """Merge the batched uploads into the run-level aggregates.

    Per-tick client step time is the slowest client's total (the barrier is
    released by the last arriver), which is what makes the per-tick max the
    number that dictates simulated throughput.
    """
    by_tick: dict = {}
    for t in bundle.timings:
        by_tick.setdefault(t.tick, []).append(t.total_ms)
    per_tick_max = [max(v) for _, v in sorted(by_tick.items())]
    per_tick_mean = [_mean(v) for _, v in sorted(by_tick.items())]

    deviation_by_tick: dict = {}
    for r in bundle.traffic:
        deviation_by_tick.setdefault(r.tick, []).append(r.deviation)

    edge_runtimes = sorted(e.runtime_ms for e in bundle.edge)
    safety_counts = {"headway": 0, "collision": 0, "lane": 0, "blockage": 0}
    for s in bundle.safety:
        safety_counts[s.kind] = safety_counts.get(s.kind, 0) + 1

    counters_total: dict = {}
    for counters in bundle.client_counters.values():
        for key, value in counters.items():
            if isinstance(value, (int, float)):
                counters_total[key] = counters_total.get(key, 0) + value

    mean_v_mps = _mean(r.v for r in bundle.traffic)
    aggregates = {
        "ticks": len(bundle.world_steps),
        "vehicles": len({r.vehicle_id for r in bundle.traffic}),
        "client_step_ms_mean": _mean(t.total_ms for t in bundle.timings),
        "client_step_ms_tick_max_mean": _mean(per_tick_max),
        "client_step_ms_tick_mean_mean": _mean(per_tick_mean),
        "client_phase_total_ms": sum(w.client_phase_ms for w in bundle.world_steps),
        "world_step_ms_mean": _mean(w.world_ms for w in bundle.world_steps),
        "deviation_mean_mps": _mean(r.deviation for r in bundle.traffic),
        "mean_velocity_mps": mean_v_mps,
        "mean_velocity_kph": mps_to_kph(mean_v_mps),
        "safety": safety_counts,
        "client_counters": counters_total,
        "edge_invocations": len(bundle.edge),
        "edge_runtime_ms_p50": _percentile(edge_runtimes, 50.0),
        "edge_runtime_ms_p99": _percentile(edge_runtimes, 99.0),
        "edge_deadline_violations": sum(
            1 for e in bundle.edge if e.runtime_ms > edge_period_ms),
        "edge_timeouts": sum(1 for e in bundle.edge if e.timeout),
        "edge_expanded_nodes": sum(e.expanded_nodes for e in bundle.edge),
        "edge_max_cluster_size": max(
            (max(e.cluster_sizes) for e in bundle.edge if e.cluster_sizes), default=0),
    }
    return RunSummary(meta=dict(bundle.meta), aggregates=aggregates,
                      bundle=bundle, partial=bundle.partial)


def deviation_series(summary: RunSummary):
    """Mean deviation per tick, as (ticks, values)."""
    per_tick: dict = {}
    for r in summary.bundle.traffic:
        per_tick.setdefault(r.tick, []).append(r.deviation)
    ticks = sorted(per_tick)
    return ticks, [_mean(per_tick[t]) for t in ticks]


def band_entry_tick(summary: RunSummary, band_mps: float = 0.5):
    """First tick from which mean deviation stays inside the band."""
    ticks, values = deviation_series(summary)
    entry = None
    for t, v in zip(ticks, values):
        if v <= band_mps:
            if entry is None:
                entry = t
        else:
            entry = None
    return entry


# ---------------------------------------------------------------------------
# CSV emission

def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path: str, columns, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(columns)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])


def emit_csv(summary: RunSummary, out_dir: str) -> None:
    """Write the four normative CSVs plus the structured summary."""
    os.makedirs(out_dir, exist_ok=True)
    b = summary.bundle
    _write_csv(os.path.join(out_dir, "traffic.csv"), TRAFFIC_COLUMNS, (
        [r.tick, r.vehicle_id, r.v, r.deviation, r.lane, r.s, r.control_source]
        for r in sorted(b.traffic, key=lambda r: (r.tick, r.vehicle_id))))
    _write_csv(os.path.join(out_dir, "step_timings.csv"), TIMINGS_COLUMNS, (
        [t.tick, t.client_id, t.processing_ms, t.network_ms, t.barrier_ms]
        for t in sorted(b.timings, key=lambda t: (t.tick, t.client_id))))
    _write_csv(os.path.join(out_dir, "safety.csv"), SAFETY_COLUMNS, (
        [s.tick, s.kind, s.id_a, s.id_b, s.value]
        for s in sorted(b.safety, key=lambda s: (s.tick, s.kind, s.id_a, s.id_b))))
    _write_csv(os.path.join(out_dir, "edge.csv"), EDGE_COLUMNS, (
        [e.generation_tick, e.algorithm, e.n_vehicles, e.runtime_ms,
         "|".join(str(c) for c in e.cluster_sizes), e.expanded_nodes,
         e.violations, int(e.timeout), e.infeasible_clusters]
        for e in sorted(b.edge, key=lambda e: e.generation_tick)))
    _write_csv(os.path.join(out_dir, "world_steps.csv"), WORLD_COLUMNS, (
        [w.tick, w.world_ms, w.client_phase_ms]
        for w in sorted(b.world_steps, key=lambda w: w.tick)))

    payload = {
        "meta": summary.meta,
        "partial": summary.partial,
        "aggregates": summary.aggregates,
        "client_counters": {str(k): v for k, v in sorted(b.client_counters.items())},
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_summary(out_dir: str) -> dict:
    with open(os.path.join(out_dir, "summary.json")) as fh:
        return json.load(fh)


def read_csv_rows(path: str):
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        return header, list(reader)


# ---------------------------------------------------------------------------
# Plot emission (standalone SVG; stable output for identical summaries)

def emit_plots(summary: RunSummary, out_dir: str) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt
    matplotlib.rcParams["svg.hashsalt"] = "edgesim"

    plots_dir = os.path.join(out_dir, "plots")
    os.makedirs(plots_dir, exist_ok=True)

    def save(fig, name):
        fig.savefig(os.path.join(plots_dir, name), format="svg",
                    metadata={"Date": None})
        plt.close(fig)

    dt = summary.meta.get("world_dt_s", 0.05)
    ticks, devs = deviation_series(summary)
    fig, ax = plt.subplots(figsize=(7, 4))
    ax.plot([t * dt for t in ticks], devs,
            label=summary.meta.get("algorithm", "run"))
    ax.axhline(0.5, linestyle="--", linewidth=0.8, color="gray")
    ax.set_xlabel("simulation time (s)")
    ax.set_ylabel("mean |v - v_target| (m/s)")
    ax.set_title("Deviation from target velocity vs simulation time")
    ax.legend()
    save(fig, "deviation_vs_time.svg")

    by_client: dict = {}
    for t in summary.bundle.timings:
        by_client.setdefault(t.client_id, []).append(t)
    clients = sorted(by_client)
    proc = [_mean(x.processing_ms for x in by_client[c]) for c in clients]
    net = [_mean(x.network_ms for x in by_client[c]) for c in clients]
    barr = [_mean(x.barrier_ms for x in by_client[c]) for c in clients]
    fig, ax = plt.subplots(figsize=(7, 4))
    xs = range(len(clients))
    ax.bar(xs, proc, label="processing")
    ax.bar(xs, net, bottom=proc, label="network")
    ax.bar(xs, barr, bottom=[p + n for p, n in zip(proc, net)], label="barrier")
    ax.set_xticks(list(xs), [str(c) for c in clients])
    ax.set_xlabel("client")
    ax.set_ylabel("mean per-tick time (ms)")
    ax.set_title("Client step time breakdown")
    ax.legend()
    save(fig, "step_time_breakdown.svg")

    runtimes = [e.runtime_ms for e in summary.bundle.edge]
    fig, ax = plt.subplots(figsize=(7, 4))
    if runtimes:
        ax.hist(runtimes, bins=min(30, max(5, len(runtimes) // 4)))
    ax.set_xlabel("edge invocation runtime (ms)")
    ax.set_ylabel("count")
    ax.set_title("Edge planning runtime distribution")
    save(fig, "edge_runtime_hist.svg")
