"""Rebuild the run plots from an output directory's CSV files."""

from __future__ import annotations

import os

from .edge import EdgeMetrics
from .metrics import (
    MetricsBundle,
    RunSummary,
    StepTimings,
    TrafficRecord,
    emit_plots,
    read_csv_rows,
    read_summary,
)


def load_bundle(out_dir: str) -> RunSummary:
    """Reconstruct enough of a RunSummary from the emitted CSVs to plot."""
    summary_obj = read_summary(out_dir)
    bundle = MetricsBundle(meta=summary_obj.get("meta", {}))

    _, rows = read_csv_rows(os.path.join(out_dir, "traffic.csv"))
    for tick, vid, v, dev, lane, s, source in rows:
        bundle.traffic.append(TrafficRecord(
            int(tick), int(vid), float(v), float(dev), int(lane), float(s), source))

    _, rows = read_csv_rows(os.path.join(out_dir, "step_timings.csv"))
    for tick, cid, proc, net, barrier in rows:
        bundle.timings.append(StepTimings(
            int(tick), int(cid), float(proc), float(net), float(barrier)))

    _, rows = read_csv_rows(os.path.join(out_dir, "edge.csv"))
    for gen, algo, n, runtime, sizes, expanded, violations, timeout, infeasible in rows:
        bundle.edge.append(EdgeMetrics(
            generation_tick=int(gen), algorithm=algo, n_vehicles=int(n),
            runtime_ms=float(runtime),
            cluster_sizes=[int(c) for c in sizes.split("|") if c],
            expanded_nodes=int(expanded), violations=int(violations),
            timeout=bool(int(timeout)), infeasible_clusters=int(infeasible)))

    return RunSummary(meta=bundle.meta, aggregates=summary_obj.get("aggregates", {}),
                      bundle=bundle, partial=bool(summary_obj.get("partial")))


def regenerate(out_dir: str) -> None:
    emit_plots(load_bundle(out_dir), out_dir)
