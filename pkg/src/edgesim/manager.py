"""Simulation orchestrator: scenario setup, the lockstep tick loop, barrier
synchronization, edge scheduling with time reconciliation, and end-of-run
metric aggregation.

The manager owns the world, the V2X collector, and the edge driver in one
process. Vehicle clients are either separate OS processes speaking the TCP
protocol (parallel mode) or in-process agents driven serially (sequential
mode, the single-threaded baseline used for speedup and equivalence
checks). Both paths exercise the same agent logic and the same collector
visibility rules, so identical seeds produce identical trajectories
regardless of client placement.

The world loop is single-threaded; network fan-out/fan-in and the edge
computation run on other threads, and all cross-thread handoff goes through
the collector and queues. The barrier is the loop's only blocking point.
"""

from __future__ import annotations

import dataclasses
import enum
import json
import logging
import math
import os
import queue
import shutil
import socket
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

from . import protocol
from .client import AgentConfig, Observation, VehicleAgent
from .config import ScenarioConfig
from .core import Control, SimClock, WaypointBuffer, lattice_target, latency_to_ticks
from .core import horizon_steps as clock_horizon_steps
from .core import ticks_per_edge_step as clock_ticks_per_edge
from .edge import PlannerInput, PlannerVehicle, edge_run_step
from .metrics import (
    MetricsBundle,
    RunSummary,
    SafetyRecord,
    StepTimings,
    TrafficRecord,
    WorldStepRecord,
    aggregate,
    emit_csv,
    emit_plots,
)
from .netmodel import make_latency_model
from .protocol import Connection, Envelope
from .v2x import Collector
from .world import World

logger = logging.getLogger(__name__)


class RunAbort(RuntimeError):
    """Unrecoverable run failure; partial metrics are still emitted."""


class Phase(enum.Enum):
    REGISTRATION = "REGISTRATION"
    RUNNING = "RUNNING"
    DRAINING = "DRAINING"
    FINISHED = "FINISHED"


_PHASE_ORDER = [Phase.REGISTRATION, Phase.RUNNING, Phase.DRAINING, Phase.FINISHED]


@dataclass
class RunPhase:
    phase: Phase = Phase.REGISTRATION
    registered: int = 0
    expected: int = 0

    def advance(self, new_phase: Phase) -> None:
        if _PHASE_ORDER.index(new_phase) < _PHASE_ORDER.index(self.phase):
            raise RuntimeError(f"phase may not move backward: {self.phase} -> {new_phase}")
        self.phase = new_phase


def schedule_delivery(generation_tick: int, algo_runtime_ms: float,
                      latency_ms: float, clock: SimClock,
                      ideal_edge: bool = False) -> int:
    """Map edge wall time plus network latency onto the simulation axis.

    availability = generation + ceil((runtime + latency) / world step),
    clamped so an output can never affect its own generation tick. With
    time reconciliation disabled (ideal edge) the output lands on the very
    next tick regardless.
    """
    if algo_runtime_ms < 0 or latency_ms < 0:
        raise ValueError("runtime and latency must be non-negative")
    if ideal_edge:
        return generation_tick + 1
    ticks = latency_to_ticks(algo_runtime_ms + latency_ms, clock)
    return generation_tick + max(1, ticks)


@dataclass
class RunOptions:
    out_dir: str
    sequential: bool = False
    expected_clients: Optional[int] = None   # None: one per vehicle
    port: Optional[int] = None
    listen_host: str = "127.0.0.1"           # 0.0.0.0 when awaiting remote clients
    ideal_edge: bool = False
    seed: Optional[int] = None
    algorithm: Optional[str] = None
    emit_outputs: bool = True
    plots: bool = True


class EventLog:
    """Ordered, thread-safe, append-only run journal (one JSON object per
    line). Line order is the authoritative event order for lockstep checks."""

    def __init__(self, path: Optional[str]):
        self._fh = open(path, "w") if path else None
        self._lock = threading.Lock()
        self._seq = 0

    def emit(self, event: str, tick: int = -1, **extra) -> None:
        if self._fh is None:
            return
        with self._lock:
            record = {"seq": self._seq, "wall": time.time(), "tick": tick,
                      "event": event}
            record.update(extra)
            self._fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            self._seq += 1

    def close(self) -> None:
        if self._fh is not None:
            self._fh.close()
            self._fh = None


# ---------------------------------------------------------------------------
# Edge driver

@dataclass
class _PendingEdge:
    future: object
    first_availability: int


class EdgeDriver:
    """Runs the pluggable edge algorithm off the world loop and injects its
    outputs at the reconciled availability ticks."""

    def __init__(self, scenario: ScenarioConfig, clock: SimClock,
                 collector: Collector, down_model, event_log: EventLog,
                 ideal_edge: bool, algorithm: str, inline: bool):
        self.scenario = scenario
        self.clock = clock
        self.collector = collector
        self.down_model = down_model
        self.event_log = event_log
        self.ideal_edge = ideal_edge
        self.algorithm = algorithm
        self.inline = inline
        self.metrics: list = []
        self.pull_ticks: set = set()
        self.failures = 0
        self._pending: list = []
        self._pool = None if inline else ThreadPoolExecutor(
            max_workers=1, thread_name_prefix="edge")
        edge_cfg = scenario.edge
        self._capacity = int(edge_cfg["capacity"])
        self._timeout_s = edge_cfg["planner_timeout_s"]
        self._runtime_model = edge_cfg["runtime_model"]
        self._runtime_ms = float(edge_cfg["runtime_ms"])
        self._inject_sleep_ms = float(edge_cfg["inject_sleep_ms"])
        self._cluster_with_vt = bool(edge_cfg["cluster_with_target_velocity"])
        self._enabled = (algorithm != "NONE" and bool(edge_cfg["edge_sets_destination"]))
        self._edge_position = tuple(scenario.network.get("edge_position", (0.0, 0.0)))
        self._horizon = clock_horizon_steps(clock)
        self._ticks_per_edge = clock_ticks_per_edge(clock)
        self._lattice_targets = {
            spec.vehicle_id: lattice_target(spec.v_target, spec.v0)
            for spec in scenario.vehicles
        }
        self._last_buffers: dict = {}   # vid -> last shipped WaypointBuffer

    @property
    def enabled(self) -> bool:
        return self._enabled

    def compensation_steps(self) -> int:
        if self.ideal_edge:
            return 0
        period_ms = self.clock.edge_dt_s * 1000.0
        return max(0, math.ceil(self.down_model.expected_ms() / period_ms - 1e-9))

    def invoke(self, generation_tick: int, world: World) -> None:
        """Assemble the planner input from collector-visible states and
        schedule the computation. Called on edge-step boundaries."""
        if not self._enabled:
            return
        # At most one invocation in flight: the previous one must have
        # deposited before its buffers can model the compensation prefix,
        # otherwise the prior-target bookkeeping would race wall time.
        for item in self._pending:
            item.future.result()
        self._pending = []
        vehicles = []
        for vid in world.vehicle_ids():
            item = self.collector.fetch_latest(vid, protocol.KIND_STATE, generation_tick)
            if item is None:
                continue
            state = item.payload
            if state.done:
                continue
            spec = world.spec(vid)
            vehicles.append(PlannerVehicle(
                vehicle_id=vid, lane=state.lane, s=state.s, v=state.v,
                v_target=self._lattice_targets[vid], max_speed=spec.max_speed,
                overtake_allowed=spec.overtake_allowed,
            ))
        compensation = self.compensation_steps()
        planner_input = PlannerInput(
            generation_tick=generation_tick,
            vehicles=tuple(vehicles),
            topology=self.scenario.topology,
            horizon_steps=self._horizon,
            compensation_steps=compensation,
            edge_dt_s=self.clock.edge_dt_s,
            prior_targets=self._prior_targets(generation_tick, compensation),
        )
        # Delivery schedule: latency sampled per vehicle now (one draw per
        # communication event, deterministic order); the runtime term comes
        # from the configured model so scheduling stays reproducible unless
        # the scenario opts into wall-clock reconciliation.
        latencies = {}
        for veh in vehicles:
            pos = (veh.s, veh.lane * self.scenario.topology.lane_width)
            latencies[veh.vehicle_id] = self.down_model.sample(self._edge_position, pos)
        self.event_log.emit("EDGE_INVOKE", tick=generation_tick,
                            vehicles=len(vehicles))
        if self._runtime_model == "fixed":
            availability = {
                vid: schedule_delivery(generation_tick, self._runtime_ms,
                                       lat, self.clock, self.ideal_edge)
                for vid, lat in latencies.items()
            }
            self.pull_ticks.update(availability.values())
            work = lambda: self._compute_and_deposit(planner_input, availability)
            if self.inline:
                work()
            else:
                first = min(availability.values(), default=generation_tick + 1)
                self._pending.append(_PendingEdge(self._pool.submit(work), first))
        else:
            # Measured reconciliation: availability depends on wall runtime,
            # so the result is joined before the next tick is commanded.
            work = lambda: self._compute_and_deposit_measured(
                planner_input, latencies, generation_tick)
            if self.inline:
                work()
            else:
                self._pending.append(_PendingEdge(
                    self._pool.submit(work), generation_tick + 1))

    def _prior_targets(self, generation_tick: int, compensation: int) -> dict:
        """(speed, lane) each vehicle will track during the compensation
        prefix, read off the buffer it is currently following."""
        if compensation == 0:
            return {}
        out = {}
        lane_w = self.scenario.topology.lane_width
        gen_step = generation_tick // self._ticks_per_edge
        for vid, buf in sorted(self._last_buffers.items()):
            buf_step = buf.generation_tick // self._ticks_per_edge
            targets = []
            for j in range(compensation):
                idx = (gen_step + j) - buf_step - buf.skip_steps
                if 0 <= idx < len(buf.points):
                    lane = round((buf.points[idx].y - lane_w / 2.0) / lane_w)
                    targets.append((buf.planned_speeds[idx], lane))
                else:
                    targets.append(None)
            out[vid] = tuple(targets)
        return out

    def _run_algorithm(self, planner_input: PlannerInput):
        try:
            return edge_run_step(
                planner_input, self.algorithm,
                capacity=self._capacity,
                timeout_s=self._timeout_s,
                cluster_with_target_velocity=self._cluster_with_vt,
                inject_sleep_ms=self._inject_sleep_ms,
            )
        except Exception:
            logger.exception("edge algorithm failed; vehicles fall back to local control")
            self.failures += 1
            self.event_log.emit("EDGE_FAILURE", tick=planner_input.generation_tick)
            return [], None

    def _deposit(self, buffers, availability: dict, generation_tick: int) -> None:
        for buf in sorted(buffers, key=lambda b: b.vehicle_id):
            delivery = availability[buf.vehicle_id]
            buf = dataclasses.replace(buf, delivery_tick=delivery)
            self._last_buffers[buf.vehicle_id] = buf
            self.collector.deposit_scheduled(
                buf.vehicle_id, protocol.KIND_WAYPOINTS, buf,
                generation_tick, delivery)
            self.event_log.emit("EDGE_DEPOSIT", tick=generation_tick,
                                vehicle=buf.vehicle_id, delivery_tick=delivery)

    def _compute_and_deposit(self, planner_input, availability) -> None:
        buffers, metrics = self._run_algorithm(planner_input)
        if metrics is not None:
            self.metrics.append(metrics)
        self._deposit(buffers, availability, planner_input.generation_tick)

    def _compute_and_deposit_measured(self, planner_input, latencies,
                                      generation_tick) -> None:
        buffers, metrics = self._run_algorithm(planner_input)
        runtime_ms = metrics.runtime_ms if metrics is not None else 0.0
        if metrics is not None:
            self.metrics.append(metrics)
        availability = {
            vid: schedule_delivery(generation_tick, runtime_ms, lat,
                                   self.clock, self.ideal_edge)
            for vid, lat in latencies.items()
        }
        self.pull_ticks.update(availability.values())
        self._deposit(buffers, availability, generation_tick)

    def ensure_delivered(self, tick: int) -> None:
        """Join any computation whose output is due at or before ``tick`` so
        deposits are visible before the tick is commanded."""
        still = []
        for item in self._pending:
            if item.first_availability <= tick or item.future.done():
                item.future.result()
            else:
                still.append(item)
        self._pending = still

    def drain(self) -> None:
        for item in self._pending:
            item.future.result()
        self._pending = []
        if self._pool is not None:
            self._pool.shutdown(wait=True)


# ---------------------------------------------------------------------------
# Client fleets

@dataclass
class TickResult:
    control: Control
    processing_ms: float
    network_ms: float
    arrival_ns: int


class SequentialFleet:
    """All vehicle agents driven serially in-process: the single-threaded
    baseline. Same agents, same pull visibility, no sockets."""

    def __init__(self, agents: dict, obs_fn, waypoint_fn, event_log: EventLog):
        self.agents = agents
        self.obs_fn = obs_fn
        self.waypoint_fn = waypoint_fn
        self.event_log = event_log
        self.duplicate_done = 0

    def ids(self):
        return sorted(self.agents)

    def active_ids(self):
        return self.ids()

    def begin_tick(self, tick: int, command: str) -> None:
        self.event_log.emit("TICK_CMD", tick=tick, command=command,
                            clients=len(self.agents))
        self._command = command

    def collect(self, tick: int, timeout_s: float) -> dict:
        results = {}
        for vid in self.ids():
            agent = self.agents[vid]
            net0 = time.perf_counter_ns()
            new_buffer = None
            pull_missing = False
            if self._command == protocol.CMD_PULL_WAYPOINTS_AND_TICK:
                new_buffer = self.waypoint_fn(vid, tick)
                if new_buffer is None:
                    pull_missing = True
            obs = self.obs_fn(vid)
            net_ns = time.perf_counter_ns() - net0
            p0 = time.perf_counter_ns()
            control = agent.step(tick, self._command, obs, new_buffer, pull_missing)
            p_ns = time.perf_counter_ns() - p0
            arrival = time.perf_counter_ns()
            self.event_log.emit("CLIENT_DONE", tick=tick, client=vid)
            results[vid] = TickResult(control, p_ns / 1e6, net_ns / 1e6, arrival)
        return results

    def end_and_collect(self, tick: int, timeout_s: float) -> dict:
        self.event_log.emit("END", tick=tick)
        uploads = {}
        for vid in self.ids():
            uploads[vid] = self.agents[vid].metrics_payload()
            self.event_log.emit("METRICS_UPLOAD", tick=tick, client=vid)
        return uploads

    def close(self) -> None:
        pass


class SocketFleet:
    """TCP server side of the protocol: registration, event push, barrier
    fan-in, pull serving, and the batched metrics collection at END."""

    def __init__(self, port: int, expected: int, run_phase: RunPhase,
                 agent_config_fn, obs_fn, waypoint_fn, event_log: EventLog,
                 on_disconnect: str, listen_host: str = "127.0.0.1"):
        self.expected = expected
        self.run_phase = run_phase
        self.agent_config_fn = agent_config_fn
        self.obs_fn = obs_fn
        self.waypoint_fn = waypoint_fn
        self.event_log = event_log
        self.on_disconnect = on_disconnect
        self.duplicate_done = 0
        self._conns: dict = {}
        self._dropped: set = set()
        self._dead: set = set()
        self._queue: queue.Queue = queue.Queue()
        self._registered = threading.Event()
        self._lock = threading.Lock()
        self._closing = False

        self._server = socket.create_server((listen_host, port), backlog=64)
        self.port = self._server.getsockname()[1]
        self._accept_thread = threading.Thread(
            target=self._accept_loop, name="accept", daemon=True)
        self._accept_thread.start()

    # -- registration ------------------------------------------------------

    def _accept_loop(self) -> None:
        while not self._closing:
            try:
                sock, _ = self._server.accept()
            except OSError:
                return
            conn = Connection(sock)
            threading.Thread(target=self._reader_loop, args=(conn,),
                             name="reader", daemon=True).start()

    def _handle_register(self, conn: Connection, env: Envelope) -> Optional[int]:
        index = int(env.payload.get("requested_vehicle_index", -1))
        with self._lock:
            if self.run_phase.phase is not Phase.REGISTRATION:
                conn.send(Envelope(protocol.ERROR,
                                   payload={"error": "registration closed"}))
                return None
            if index < 0 or index >= self.expected:
                conn.send(Envelope(protocol.ERROR,
                                   payload={"error": f"vehicle index {index} out of range"}))
                return None
            if index in self._conns:
                conn.send(Envelope(protocol.ERROR,
                                   payload={"error": f"vehicle index {index} already registered"}))
                return None
            self._conns[index] = conn
            self.run_phase.registered = len(self._conns)
            done = self.run_phase.registered == self.expected
        self.event_log.emit("REGISTER", tick=-1, client=index)
        conn.send(Envelope(protocol.REGISTER_ACK, payload={
            "assigned_id": index,
            "vehicle_config": self.agent_config_fn(index).to_payload(),
        }))
        self.event_log.emit("REGISTER_ACK", tick=-1, client=index)
        if done:
            self._registered.set()
        return index

    def wait_registered(self, timeout_s: float) -> None:
        if self.expected == 0:
            return
        if not self._registered.wait(timeout_s):
            with self._lock:
                have = sorted(self._conns)
            raise RunAbort(
                f"only {len(have)}/{self.expected} clients registered "
                f"within {timeout_s:.0f}s (have {have})")

    # -- per-connection reader ---------------------------------------------

    def _reader_loop(self, conn: Connection) -> None:
        client_id = None
        try:
            while True:
                env = conn.recv()
                if env is None:
                    break
                if env.type == protocol.REGISTER:
                    assigned = self._handle_register(conn, env)
                    if assigned is None:
                        conn.close()
                        return
                    client_id = assigned
                elif env.type == protocol.CLIENT_DONE:
                    arrival = time.perf_counter_ns()
                    self.event_log.emit("CLIENT_DONE", tick=env.tick,
                                        client=env.sender_id)
                    self._queue.put(("done", env.tick, env.sender_id,
                                     env.payload, arrival))
                elif env.type == protocol.PULL_REQUEST:
                    self._serve_pull(conn, env)
                elif env.type == protocol.END:
                    self.event_log.emit("METRICS_UPLOAD", tick=env.tick,
                                        client=env.sender_id)
                    self._queue.put(("upload", env.sender_id, env.payload))
                else:
                    conn.send(Envelope(protocol.ERROR,
                                       payload={"error": f"unexpected {env.type}"}))
        except protocol.DecodeError as exc:
            logger.error("client %s: malformed frame: %s", client_id, exc)
        except OSError:
            pass
        finally:
            if client_id is not None:
                with self._lock:
                    self._dead.add(client_id)
                if not self._closing:
                    self._queue.put(("disconnect", client_id))

    def _serve_pull(self, conn: Connection, env: Envelope) -> None:
        kind = env.payload.get("kind")
        vid = int(env.payload.get("vehicle_id", env.sender_id))
        if kind == protocol.KIND_OBSERVATION:
            obs = self.obs_fn(vid)
            payload = {
                "available": True,
                "me": protocol.state_to_dict(obs.me),
                "nearby": [protocol.state_to_dict(o) for o in obs.nearby],
            }
        elif kind == protocol.KIND_WAYPOINTS:
            buf = self.waypoint_fn(vid, env.tick)
            if buf is None:
                payload = {"available": False}
            else:
                payload = {"available": True, "item": protocol.buffer_to_dict(buf)}
        else:
            conn.send(Envelope(protocol.ERROR, tick=env.tick,
                               payload={"error": f"unknown pull kind {kind!r}"}))
            return
        conn.send(Envelope(protocol.PULL_REPLY, tick=env.tick, payload=payload))

    # -- lockstep ----------------------------------------------------------

    def ids(self):
        with self._lock:
            return sorted(self._conns)

    def active_ids(self):
        with self._lock:
            return sorted(set(self._conns) - self._dropped)

    def begin_tick(self, tick: int, command: str) -> None:
        env = Envelope(protocol.TICK_CMD, tick=tick, payload={"command": command})
        self.event_log.emit("TICK_CMD", tick=tick, command=command,
                            clients=len(self.active_ids()))
        with self._lock:
            peers = {i: c for i, c in self._conns.items() if i not in self._dropped}
        result = protocol.broadcast(env, peers)
        for vid in result.disconnected:
            self._queue.put(("disconnect", vid))

    def collect(self, tick: int, timeout_s: float) -> dict:
        results: dict = {}
        waiting = set(self.active_ids())
        deadline = time.monotonic() + timeout_s
        while waiting:
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                raise RunAbort(
                    f"barrier timeout at tick {tick}: missing clients {sorted(waiting)}")
            try:
                msg = self._queue.get(timeout=min(remaining, 0.5))
            except queue.Empty:
                continue
            if msg[0] == "disconnect":
                vid = msg[1]
                self.event_log.emit("DISCONNECT", tick=tick, client=vid)
                if self.on_disconnect == "continue":
                    self._dropped.add(vid)
                    waiting.discard(vid)
                    continue
                raise RunAbort(f"client {vid} disconnected at tick {tick}")
            if msg[0] == "upload":
                continue  # late uploads handled at END
            _, done_tick, vid, payload, arrival = msg
            if done_tick != tick or vid not in waiting:
                self.duplicate_done += 1
                continue
            waiting.discard(vid)
            timings = payload.get("timings", {})
            results[vid] = TickResult(
                control=protocol.control_from_dict(payload["control"]),
                processing_ms=float(timings.get("processing_ms", 0.0)),
                network_ms=float(timings.get("network_ms", 0.0)),
                arrival_ns=arrival,
            )
        return results

    def end_and_collect(self, tick: int, timeout_s: float) -> dict:
        self.event_log.emit("END", tick=tick)
        env = Envelope(protocol.END, tick=tick, payload={})
        with self._lock:
            peers = {i: c for i, c in self._conns.items() if i not in self._dropped}
        protocol.broadcast(env, peers)
        uploads: dict = {}
        deadline = time.monotonic() + timeout_s
        while time.monotonic() < deadline:
            with self._lock:
                waiting = set(peers) - set(uploads) - self._dead
            if not waiting:
                break
            try:
                msg = self._queue.get(timeout=0.2)
            except queue.Empty:
                continue
            if msg[0] == "upload":
                _, vid, payload = msg
                if vid in uploads:
                    logger.warning("client %d re-uploaded metrics; first kept", vid)
                    continue
                uploads[vid] = payload
        return uploads

    def close(self) -> None:
        self._closing = True
        try:
            self._server.close()
        except OSError:
            pass
        with self._lock:
            conns = list(self._conns.values())
        for conn in conns:
            conn.close()


# ---------------------------------------------------------------------------
# The manager

class SimulationManager:
    def __init__(self, scenario: ScenarioConfig, options: RunOptions):
        self.scenario = scenario
        self.options = options
        world_cfg = dict(scenario.world)
        if options.seed is not None:
            world_cfg["seed"] = options.seed
        self.seed = int(world_cfg["seed"])
        self.algorithm = options.algorithm or scenario.edge["algorithm"]
        self.clock = scenario.clock
        self.topology = scenario.topology
        self.world_cfg = world_cfg
        self.run_phase = RunPhase(expected=len(scenario.vehicles))
        self.bundle = MetricsBundle()
        self._ticks_per_edge = clock_ticks_per_edge(self.clock)
        self.port: Optional[int] = None
        self.listening = threading.Event()   # set once the server accepts

    # -- agent/observation plumbing shared by both fleets -------------------

    def _agent_config(self, vehicle_id: int) -> AgentConfig:
        spec = next(s for s in self.scenario.vehicles if s.vehicle_id == vehicle_id)
        behavior = self.scenario.behaviors.get(vehicle_id, {})
        return AgentConfig(
            vehicle_id=vehicle_id,
            v_target=spec.v_target,
            v_target_lattice=lattice_target(spec.v_target, spec.v0),
            max_speed=spec.max_speed,
            min_headway=self.topology.min_headway,
            lookahead_m=float(self.world_cfg["lookahead_m"]),
            staleness_threshold_ms=float(self.scenario.edge["staleness_threshold_ms"]),
            world_dt_s=self.clock.world_dt_s,
            edge_dt_s=self.clock.edge_dt_s,
            ticks_per_edge_step=self._ticks_per_edge,
            num_lanes=self.topology.num_lanes,
            lane_width=self.topology.lane_width,
            overtake_allowed=spec.overtake_allowed,
            compute_ms=float(behavior.get("compute_ms", 0.0)),
        )

    def _observation(self, vehicle_id: int) -> Observation:
        me = self.world.snapshot(vehicle_id)
        nearby = self.world.nearby(vehicle_id, float(self.world_cfg["lookahead_m"]))
        return Observation(me=me, nearby=nearby)

    def _waypoints(self, vehicle_id: int, tick: int) -> Optional[WaypointBuffer]:
        item = self.collector.fetch_latest(vehicle_id, protocol.KIND_WAYPOINTS, tick)
        return None if item is None else item.payload

    # -- run ----------------------------------------------------------------

    def run(self) -> RunSummary:
        opts = self.options
        out_dir = opts.out_dir
        event_log_path = None
        if opts.emit_outputs:
            os.makedirs(out_dir, exist_ok=True)
            if self.scenario.source_path and os.path.exists(self.scenario.source_path):
                shutil.copy(self.scenario.source_path,
                            os.path.join(out_dir, "config.yaml"))
            event_log_path = os.path.join(out_dir, "event_log.jsonl")
        self.event_log = EventLog(event_log_path)

        self.world = World(self.clock, self.topology, self.scenario.vehicles,
                           seed=self.seed)
        self.collector = Collector()
        self._up_model = make_latency_model(self.scenario.network, self.seed, "up")
        down_model = make_latency_model(self.scenario.network, self.seed, "down")
        self.edge_driver = EdgeDriver(
            self.scenario, self.clock, self.collector, down_model,
            self.event_log, opts.ideal_edge, self.algorithm,
            inline=opts.sequential)
        self._edge_position = tuple(
            self.scenario.network.get("edge_position", (0.0, 0.0)))

        fleet = None
        abort_reason = None
        try:
            fleet = self._make_fleet()
            self.run_phase.advance(Phase.RUNNING)
            self.event_log.emit("RUN_START", tick=0, seed=self.seed,
                                algorithm=self.algorithm,
                                sequential=opts.sequential)
            self._deposit_states(produced_tick=0)
            self._loop(fleet)
        except RunAbort as exc:
            abort_reason = str(exc)
            logger.error("run aborted: %s", abort_reason)
            self.event_log.emit("ABORT", tick=self.world.tick_count,
                                reason=abort_reason)
        finally:
            self.edge_driver.drain()

        self.run_phase.advance(Phase.DRAINING)
        uploads = {}
        self._fleet_dupes = 0
        if fleet is not None:
            drain_timeout = (2.0 if abort_reason
                             else min(15.0, float(self.world_cfg["barrier_timeout_s"])))
            try:
                uploads = fleet.end_and_collect(self.world.tick_count,
                                                timeout_s=drain_timeout)
                self._fleet_dupes = fleet.duplicate_done
            finally:
                fleet.close()
        self.run_phase.advance(Phase.FINISHED)

        summary = self._finalize(uploads, abort_reason)
        if opts.emit_outputs:
            emit_csv(summary, out_dir)
            if opts.plots:
                emit_plots(summary, out_dir)
        self.event_log.close()
        return summary

    def _make_fleet(self):
        opts = self.options
        obs_fn = self._observation
        wp_fn = self._waypoints
        if opts.sequential:
            agents = {
                spec.vehicle_id: VehicleAgent(self._agent_config(spec.vehicle_id))
                for spec in self.scenario.vehicles
            }
            self.run_phase.registered = len(agents)
            return SequentialFleet(agents, obs_fn, wp_fn, self.event_log)
        expected = opts.expected_clients
        if expected is None:
            expected = len(self.scenario.vehicles)
        if expected != len(self.scenario.vehicles):
            raise RunAbort(
                f"need exactly one client per vehicle: expected {expected}, "
                f"scenario has {len(self.scenario.vehicles)}")
        port = opts.port if opts.port is not None else int(self.world_cfg["client_port"])
        fleet = SocketFleet(
            port, expected, self.run_phase, self._agent_config,
            obs_fn, wp_fn, self.event_log,
            on_disconnect=str(self.world_cfg["on_disconnect"]),
            listen_host=opts.listen_host)
        self.port = fleet.port
        self.listening.set()
        fleet.wait_registered(timeout_s=float(self.world_cfg["barrier_timeout_s"]))
        return fleet

    def _deposit_states(self, produced_tick: int) -> None:
        for state in self.world.states():
            pos = (state.s, self.topology.lane_center_y(state.lane))
            latency = self._up_model.sample(pos, self._edge_position)
            self.collector.deposit(state.id, protocol.KIND_STATE, state,
                                   produced_tick, latency, self.clock)

    def _loop(self, fleet) -> None:
        max_ticks = int(self.world_cfg["max_ticks"])
        barrier_timeout = float(self.world_cfg["barrier_timeout_s"])
        edge_period_ms = self.clock.edge_dt_s * 1000.0

        for t in range(max_ticks):
            self.edge_driver.ensure_delivered(t)
            command = (protocol.CMD_PULL_WAYPOINTS_AND_TICK
                       if t in self.edge_driver.pull_ticks else protocol.CMD_TICK)
            phase0 = time.perf_counter_ns()
            fleet.begin_tick(t, command)
            results = fleet.collect(t, barrier_timeout)
            release = time.perf_counter_ns()
            client_phase_ms = (release - phase0) / 1e6

            for vid in sorted(results):
                self.world.apply_control(vid, results[vid].control)
            w0 = time.perf_counter_ns()
            report = self.world.tick()
            world_ms = (time.perf_counter_ns() - w0) / 1e6
            self.event_log.emit("WORLD_TICK", tick=t)

            for vid in sorted(results):
                r = results[vid]
                self.bundle.timings.append(StepTimings(
                    tick=t, client_id=vid,
                    processing_ms=r.processing_ms,
                    network_ms=r.network_ms,
                    barrier_ms=max(0.0, (release - r.arrival_ns) / 1e6),
                ))
            self.bundle.world_steps.append(
                WorldStepRecord(tick=t, world_ms=world_ms,
                                client_phase_ms=client_phase_ms))
            self._record_safety(report)

            new_tick = t + 1
            self._deposit_states(produced_tick=new_tick)
            if self.world.all_done():
                self.event_log.emit("ALL_DONE", tick=new_tick)
                break
            if new_tick % self._ticks_per_edge == 0 and new_tick < max_ticks:
                self.edge_driver.invoke(new_tick, self.world)

    def _record_safety(self, report) -> None:
        for rear, front, gap in report.headway_violations:
            self.bundle.safety.append(SafetyRecord(report.tick, "headway", rear, front, gap))
        for rear, front in report.collisions:
            self.bundle.safety.append(SafetyRecord(report.tick, "collision", rear, front, 0.0))
        for vid, lane in report.lane_violations:
            self.bundle.safety.append(SafetyRecord(report.tick, "lane", vid, -1, float(lane)))
        for vid in report.blockages:
            self.bundle.safety.append(SafetyRecord(report.tick, "blockage", vid, -1, 0.0))

    def _finalize(self, uploads: dict, abort_reason) -> RunSummary:
        bundle = self.bundle
        expected_uploads = {spec.vehicle_id for spec in self.scenario.vehicles}
        missing = sorted(expected_uploads - set(uploads))
        for vid in sorted(uploads):
            payload = uploads[vid]
            for row in payload.get("traffic", []):
                tick, vehicle_id, v, deviation, lane, s, source = row
                bundle.traffic.append(TrafficRecord(
                    tick=int(tick), vehicle_id=int(vehicle_id), v=float(v),
                    deviation=float(deviation), lane=int(lane), s=float(s),
                    control_source=str(source)))
            bundle.client_counters[vid] = payload.get("counters", {})
        bundle.edge.extend(self.edge_driver.metrics)
        bundle.partial = bool(abort_reason) or bool(missing)
        bundle.meta = {
            "scenario": self.scenario.name,
            "algorithm": self.algorithm,
            "seed": self.seed,
            "mode": "sequential" if self.options.sequential else "parallel",
            "ideal_edge": self.options.ideal_edge,
            "world_dt_s": self.clock.world_dt_s,
            "edge_dt_s": self.clock.edge_dt_s,
            "vehicles": len(self.scenario.vehicles),
            "max_ticks": int(self.world_cfg["max_ticks"]),
            "abort_reason": abort_reason,
            "missing_uploads": missing,
            "edge_failures": self.edge_driver.failures,
            "ignored_done_controls": self.world.ignored_done_controls,
            "duplicate_client_done": getattr(self, "_fleet_dupes", 0),
        }
        return aggregate(bundle, edge_period_ms=self.clock.edge_dt_s * 1000.0)
