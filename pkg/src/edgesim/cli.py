"""Command-line entry points.

    edgesim run --scenario F --out D [--seed S] [--port P]
                [--local-clients N | --wait-remote N | --sequential]
                [--ideal-edge] [--edge-algorithm A] [--no-plots]
    edgesim spawn-client --manager HOST:PORT --vehicle-index N
    edgesim plot --out D

Exit codes: 0 ok, 1 error, 2 partial run. The `run` process is itself the
simulation manager; local clients are spawned as operating-system processes
(never in-process threads). ECAV_OUT_DIR provides the default output root
when --out is omitted.
"""

from __future__ import annotations

import argparse
import logging
import os
import subprocess
import sys
import threading
import time

from .config import ScenarioError, load_scenario
from .manager import RunAbort, RunOptions, SimulationManager

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="edgesim",
        description="Tick-synchronized highway co-simulation with an edge-assisted planning plane.")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario as the simulation manager")
    run.add_argument("--scenario", required=True, help="scenario YAML file")
    run.add_argument("--out", help="output directory (default: $ECAV_OUT_DIR/<name>-<stamp>)")
    run.add_argument("--seed", type=int, help="override the scenario seed")
    run.add_argument("--port", type=int, help="TCP port for clients (0 = ephemeral)")
    group = run.add_mutually_exclusive_group()
    group.add_argument("--local-clients", type=int, metavar="N",
                       help="spawn N local client processes")
    group.add_argument("--wait-remote", type=int, metavar="N",
                       help="wait for N remote client registrations")
    group.add_argument("--sequential", action="store_true",
                       help="run all clients in-process, serially (baseline)")
    run.add_argument("--ideal-edge", action="store_true",
                     help="disable time reconciliation: edge output lands next tick")
    run.add_argument("--edge-algorithm",
                     choices=["CLUSTERED_ASTAR", "JOINT_ASTAR", "NONE"],
                     help="override edge_base.algorithm")
    run.add_argument("--no-plots", action="store_true", help="skip SVG plot emission")

    spawn = sub.add_parser("spawn-client", help="run one vehicle client process")
    spawn.add_argument("--manager", required=True, metavar="HOST:PORT")
    spawn.add_argument("--vehicle-index", required=True, type=int)
    spawn.add_argument("--connect-timeout", type=float, default=30.0,
                       help="seconds to keep retrying the first connection")

    plot = sub.add_parser("plot", help="regenerate plots from a run directory")
    plot.add_argument("--out", required=True, help="existing run output directory")
    return parser


def _default_out_dir(scenario_name: str) -> str:
    root = os.environ.get("ECAV_OUT_DIR", "out")
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return os.path.join(root, f"{scenario_name}-{stamp}")


def _spawn_local_clients(manager: SimulationManager, count: int):
    """Launch client processes once the manager socket is listening."""
    procs = []

    def spawner():
        if not manager.listening.wait(timeout=30.0):
            logger.error("manager never started listening; no clients spawned")
            return
        for index in range(count):
            procs.append(subprocess.Popen([
                sys.executable, "-m", "edgesim", "spawn-client",
                "--manager", f"127.0.0.1:{manager.port}",
                "--vehicle-index", str(index),
            ]))

    thread = threading.Thread(target=spawner, name="client-spawner", daemon=True)
    thread.start()
    return thread, procs


def cmd_run(args) -> int:
    try:
        scenario = load_scenario(args.scenario)
    except ScenarioError as exc:
        for path, msg in exc.problems:
            print(f"error: {path}: {msg}", file=sys.stderr)
        return EXIT_ERROR
    except Exception as exc:  # YAML parse errors carry line info
        print(f"error: {args.scenario}: {exc}", file=sys.stderr)
        return EXIT_ERROR

    expected = None
    if args.local_clients is not None:
        expected = args.local_clients
    elif args.wait_remote is not None:
        expected = args.wait_remote
    elif not args.sequential:
        # default: spawn one local client per vehicle
        args.local_clients = len(scenario.vehicles)
        expected = args.local_clients
    if expected is not None and expected != len(scenario.vehicles):
        print(f"error: need exactly one client per vehicle "
              f"({len(scenario.vehicles)} vehicles, {expected} clients requested)",
              file=sys.stderr)
        return EXIT_ERROR

    out_dir = args.out or _default_out_dir(scenario.name)
    options = RunOptions(
        out_dir=out_dir,
        sequential=args.sequential,
        expected_clients=expected,
        port=args.port,
        listen_host="0.0.0.0" if args.wait_remote is not None else "127.0.0.1",
        ideal_edge=args.ideal_edge,
        seed=args.seed,
        algorithm=args.edge_algorithm,
        plots=not args.no_plots,
    )
    manager = SimulationManager(scenario, options)

    procs = []
    spawner = None
    if args.local_clients:
        spawner, procs = _spawn_local_clients(manager, args.local_clients)

    try:
        summary = manager.run()
    except RunAbort as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    finally:
        if spawner is not None:
            spawner.join(timeout=5.0)
        deadline = time.monotonic() + 10.0
        for proc in procs:
            try:
                proc.wait(timeout=max(0.1, deadline - time.monotonic()))
            except subprocess.TimeoutExpired:
                proc.kill()

    print(f"run complete: {out_dir}")
    for key in ("mean_velocity_kph", "deviation_mean_mps", "client_step_ms_mean",
                "world_step_ms_mean"):
        print(f"  {key}: {summary.aggregates[key]:.3f}")
    safety = summary.aggregates["safety"]
    print(f"  safety: collisions={safety.get('collision', 0)} "
          f"headway={safety.get('headway', 0)}")
    if summary.partial:
        print("  NOTE: partial run (see summary.json)", file=sys.stderr)
        return EXIT_PARTIAL
    return EXIT_OK


def cmd_spawn_client(args) -> int:
    from .client import run_client
    host, _, port = args.manager.rpartition(":")
    if not host or not port.isdigit():
        print(f"error: --manager must be HOST:PORT, got {args.manager!r}",
              file=sys.stderr)
        return EXIT_ERROR
    try:
        return run_client(host, int(port), args.vehicle_index,
                          connect_timeout_s=args.connect_timeout)
    except Exception as exc:
        print(f"error: client failed: {exc}", file=sys.stderr)
        return EXIT_ERROR


def cmd_plot(args) -> int:
    from . import plotting
    if not os.path.isdir(args.out):
        print(f"error: no such run directory: {args.out}", file=sys.stderr)
        return EXIT_ERROR
    try:
        plotting.regenerate(args.out)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    print(f"plots written to {os.path.join(args.out, 'plots')}")
    return EXIT_OK


def main(argv=None) -> int:
    logging.basicConfig(
        level=os.environ.get("EDGESIM_LOG", "INFO"),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        return cmd_run(args)
    if args.command == "spawn-client":
        return cmd_spawn_client(args)
    return cmd_plot(args)


if __name__ == "__main__":
    sys.exit(main())
