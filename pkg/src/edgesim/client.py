"""Standalone vehicle client: per-tick control loop, local greedy planner,
and edge-waypoint following with staleness override.

The control logic lives in VehicleAgent, which is pure with respect to its
inputs (tick, command, observation, pulled buffer): the TCP client process
and the manager's in-process sequential driver both drive the same agent,
which is what makes parallel and sequential runs produce identical
trajectories.

Edge guidance is treated as super-sensor input: it is followed only while
fresh (staleness threshold) and locally validated; otherwise the vehicle
falls back to its own greedy plan. Stale buffers are discarded permanently.
"""

from __future__ import annotations

import logging
import socket
import time
from dataclasses import dataclass, field
from typing import Optional

from . import protocol
from .core import HOLD, Control, ControlSource, VehicleState, WaypointBuffer
from .protocol import Connection, Envelope

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class AgentConfig:
    vehicle_id: int
    v_target: float            # unrounded, for metrics
    v_target_lattice: float    # planning target on the 1 m/s lattice
    max_speed: float
    min_headway: float
    lookahead_m: float
    staleness_threshold_ms: float
    world_dt_s: float
    edge_dt_s: float
    ticks_per_edge_step: int
    num_lanes: int
    lane_width: float = 3.5
    overtake_allowed: bool = True
    compute_ms: float = 0.0    # emulated control-stack load per tick

    @classmethod
    def from_payload(cls, payload: dict) -> "AgentConfig":
        return cls(**{k: payload[k] for k in cls.__dataclass_fields__})

    def to_payload(self) -> dict:
        return {k: getattr(self, k) for k in self.__dataclass_fields__}


@dataclass
class Observation:
    """Local sensing: own state plus line-of-sight traffic (fore and aft)
    in the same or adjacent lanes."""

    me: VehicleState
    nearby: list


def _lead(me: VehicleState, nearby, lookahead_m: float) -> Optional[VehicleState]:
    best = None
    for other in nearby:
        if other.lane != me.lane:
            continue
        ds = other.s - me.s
        if 0 < ds <= lookahead_m and (best is None or ds < best.s - me.s):
            best = other
    return best


def _brake_gap(me_v: float, other_v: float, min_headway: float, edge_dt_s: float) -> float:
    """Distance needed to shed the speed excess at 1 m/s per planning step
    while keeping the headway margin."""
    r = max(0.0, me_v - other_v)
    return min_headway + edge_dt_s * r * (r + 1.0) / 2.0


def local_greedy_plan(me: VehicleState, nearby, cfg: AgentConfig) -> Control:
    """Non-collaborative baseline: chase the target speed in the current
    lane; when a slower vehicle blocks the way, try an adjacent lane with
    open gaps (left first), else fall in behind the leader.

    Uses only line-of-sight information. Acceleration happens only on an
    open road or behind traffic already at/above the vehicle's own target.
    """
    if me.done:
        return HOLD
    leader = _lead(me, nearby, cfg.lookahead_m)

    if leader is None or leader.v >= cfg.v_target_lattice - 1e-9:
        diff = cfg.v_target_lattice - me.v
        dv = 1 if diff >= 0.5 else (-1 if diff <= -0.5 else 0)
        if dv > 0 and me.v + 1 > cfg.max_speed + 1e-9:
            dv = 0
        if dv < 0 and me.v - 1 < -1e-9:
            dv = 0
        return Control(dv, 0, ControlSource.LOCAL)

    if cfg.overtake_allowed:
        for dlane in (1, -1):  # prefer left (higher lane index)
            lane = me.lane + dlane
            if not (0 <= lane < cfg.num_lanes):
                continue
            if _lane_change_safe(me, nearby, lane, cfg):
                return Control(0, dlane, ControlSource.LOCAL)

    # Stuck behind the leader: close in at constant speed, brake to its
    # speed once inside the envelope that 1 m/s-per-step deceleration needs.
    gap = leader.s - me.s
    if me.v > leader.v and gap <= _brake_gap(me.v, leader.v, cfg.min_headway, cfg.edge_dt_s):
        if me.v - 1 >= -1e-9:
            return Control(-1, 0, ControlSource.LOCAL)
    return HOLD


def _lane_change_safe(me: VehicleState, nearby, lane: int, cfg: AgentConfig) -> bool:
    """Fore and aft gaps in the target lane must be open: at least the
    headway distance behind, and enough braking room ahead."""
    for other in nearby:
        if other.lane != lane:
            continue
        ds = other.s - me.s
        if ds <= 0:
            if -ds < cfg.min_headway:
                return False
        else:
            if ds < _brake_gap(me.v, other.v, cfg.min_headway, cfg.edge_dt_s):
                return False
    return True


def follow_waypoints(buffer: WaypointBuffer, me: VehicleState, now_tick: int,
                     nearby, cfg: AgentConfig):
    """Control toward the buffer's waypoint for the current edge step.

    Returns (control, verdict) where verdict is "ok", "pending" (first
    executable step not reached yet), "exhausted", or "invalid" (failed
    local validation: off-road lane, implied |dv| > 1, implied lane jump,
    or a headway conflict with an observed neighbor).
    """
    k = cfg.ticks_per_edge_step
    step = (now_tick - buffer.generation_tick) // k
    idx = step - buffer.skip_steps
    if idx < 0:
        return None, "pending"
    if idx >= len(buffer.points):
        return None, "exhausted"

    wp = buffer.points[idx]
    lane = round((wp.y - cfg.lane_width / 2.0) / cfg.lane_width)
    if not (0 <= lane < cfg.num_lanes):
        return None, "invalid"
    dlane = lane - me.lane
    if abs(dlane) > 1:
        return None, "invalid"
    dv_f = buffer.planned_speeds[idx] - me.v
    if abs(dv_f) > 1.0 + 1e-9:
        return None, "invalid"
    dv = int(round(dv_f))

    if dlane != 0:
        for other in nearby:
            if other.lane == lane and abs(other.s - me.s) < cfg.min_headway:
                return None, "invalid"
        return Control(0, dlane, ControlSource.EDGE), "ok"
    if dv != 0:
        leader = _lead(me, nearby, cfg.lookahead_m)
        if dv > 0 and leader is not None and leader.s - me.s < cfg.min_headway:
            return None, "invalid"
        if (dv > 0 and me.v + 1 > cfg.max_speed + 1e-9) or (dv < 0 and me.v - 1 < -1e-9):
            return None, "invalid"
        return Control(dv, 0, ControlSource.EDGE), "ok"
    return Control(0, 0, ControlSource.EDGE), "ok"


@dataclass
class TrafficPoint:
    tick: int
    vehicle_id: int
    v: float
    deviation: float
    lane: int
    s: float
    control_source: str


@dataclass
class AgentCounters:
    staleness_fallbacks: int = 0
    pull_fallbacks: int = 0
    validation_failures: int = 0
    exhausted_buffers: int = 0
    buffers_received: int = 0
    buffers_consumed: int = 0
    edge_ticks: int = 0
    local_ticks: int = 0
    eligible_ticks: int = 0
    first_use_indices: dict = field(default_factory=dict)   # first executed idx -> count
    consumed_skip_steps: dict = field(default_factory=dict)  # skip_steps -> count

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in (
            "staleness_fallbacks", "pull_fallbacks", "validation_failures",
            "exhausted_buffers", "buffers_received", "buffers_consumed",
            "edge_ticks", "local_ticks", "eligible_ticks")}
        out["first_use_indices"] = {str(k): v for k, v in sorted(self.first_use_indices.items())}
        out["consumed_skip_steps"] = {str(k): v for k, v in sorted(self.consumed_skip_steps.items())}
        return out


class VehicleAgent:
    """Per-vehicle control state machine, transport-agnostic."""

    def __init__(self, cfg: AgentConfig):
        self.cfg = cfg
        self.active: Optional[WaypointBuffer] = None
        self.pending: Optional[WaypointBuffer] = None
        self._active_used = False
        self.counters = AgentCounters()
        self.traffic: list = []

    @property
    def mode(self) -> str:
        return "EDGE_ASSISTED" if self.active is not None else "LOCAL_GREEDY"

    def _stale(self, buffer: WaypointBuffer, now_tick: int) -> bool:
        age_ms = (now_tick - buffer.generation_tick) * self.cfg.world_dt_s * 1000.0
        return age_ms > self.cfg.staleness_threshold_ms + 1e-9

    def _first_executable_reached(self, buffer: WaypointBuffer, now_tick: int) -> bool:
        step = (now_tick - buffer.generation_tick) // self.cfg.ticks_per_edge_step
        return step >= buffer.skip_steps

    def step(self, tick: int, command: str, obs: Observation,
             new_buffer: Optional[WaypointBuffer] = None,
             pull_missing: bool = False) -> Control:
        """One control cycle; returns the control to report for this tick."""
        cfg = self.cfg
        if pull_missing:
            self.counters.pull_fallbacks += 1
        if new_buffer is not None:
            self.counters.buffers_received += 1
            self.pending = new_buffer

        # Promote the pending buffer once its first executable step is due,
        # or sooner if nothing is active; drop it instead if already stale.
        if self.pending is not None:
            if self._stale(self.pending, tick):
                self.counters.staleness_fallbacks += 1
                self.pending = None
            elif self.active is None or self._first_executable_reached(self.pending, tick):
                self.active = self.pending
                self._active_used = False
                self.pending = None

        if self.active is not None and self._stale(self.active, tick):
            self.counters.staleness_fallbacks += 1
            self.active = None

        control = None
        if self.active is not None:
            self.counters.eligible_ticks += 1
            control, verdict = follow_waypoints(self.active, obs.me, tick, obs.nearby, cfg)
            if verdict == "ok" and not self._active_used:
                self._active_used = True
                step0 = (tick - self.active.generation_tick) // cfg.ticks_per_edge_step
                self.counters.buffers_consumed += 1
                self.counters.first_use_indices[step0] = (
                    self.counters.first_use_indices.get(step0, 0) + 1)
                self.counters.consumed_skip_steps[self.active.skip_steps] = (
                    self.counters.consumed_skip_steps.get(self.active.skip_steps, 0) + 1)
            if verdict == "invalid":
                self.counters.validation_failures += 1
                self.active = None
            elif verdict == "exhausted":
                self.counters.exhausted_buffers += 1
                self.active = None

        if control is None:
            control = local_greedy_plan(obs.me, obs.nearby, cfg)

        if control.source is ControlSource.EDGE:
            self.counters.edge_ticks += 1
        else:
            self.counters.local_ticks += 1

        if cfg.compute_ms > 0:
            _busy_wait(cfg.compute_ms)

        self.traffic.append(TrafficPoint(
            tick=tick,
            vehicle_id=cfg.vehicle_id,
            v=obs.me.v,
            deviation=abs(obs.me.v - cfg.v_target),
            lane=obs.me.lane,
            s=obs.me.s,
            control_source=control.source.value,
        ))
        return control

    def metrics_payload(self) -> dict:
        return {
            "traffic": [
                [p.tick, p.vehicle_id, p.v, p.deviation, p.lane, p.s, p.control_source]
                for p in self.traffic
            ],
            "counters": self.counters.as_dict(),
        }


def _busy_wait(ms: float) -> None:
    # Busy loop, not sleep: emulates compute that genuinely occupies a core,
    # which is what client-side parallelism is supposed to win back.
    deadline = time.perf_counter() + ms / 1000.0
    while time.perf_counter() < deadline:
        pass


# ---------------------------------------------------------------------------
# TCP client process

class ClientAborted(RuntimeError):
    pass


def run_client(host: str, port: int, vehicle_index: int,
               connect_timeout_s: float = 30.0) -> int:
    """Connect, register, run the receive->compute->reply loop, exit 0 on END."""
    sock = _connect_with_retry(host, port, connect_timeout_s)
    conn = Connection(sock)
    try:
        return _client_loop(conn, vehicle_index)
    finally:
        conn.close()


def _connect_with_retry(host: str, port: int, timeout_s: float) -> socket.socket:
    deadline = time.monotonic() + timeout_s
    while True:
        try:
            return socket.create_connection((host, port), timeout=timeout_s)
        except OSError:
            if time.monotonic() >= deadline:
                raise
            time.sleep(0.05)


def _client_loop(conn: Connection, vehicle_index: int) -> int:
    conn.send(Envelope(protocol.REGISTER, payload={
        "client_kind": "vehicle",
        "requested_vehicle_index": vehicle_index,
    }))
    ack = conn.recv()
    if ack is None or ack.type == protocol.ERROR:
        logger.error("registration failed: %s", ack.payload if ack else "connection closed")
        return 1
    if ack.type != protocol.REGISTER_ACK:
        logger.error("unexpected reply to REGISTER: %s", ack.type)
        return 1
    cfg = AgentConfig.from_payload(ack.payload["vehicle_config"])
    agent = VehicleAgent(cfg)
    my_id = int(ack.payload["assigned_id"])
    expected_tick = 0

    while True:
        env = conn.recv()
        if env is None:
            logger.error("client %d: manager connection closed mid-run", my_id)
            return 1
        if env.type == protocol.ERROR:
            logger.error("client %d: manager error: %s", my_id, env.payload)
            return 1
        if env.type == protocol.END or (
                env.type == protocol.TICK_CMD
                and env.payload.get("command") == protocol.CMD_END):
            conn.send(Envelope(protocol.END, tick=env.tick, sender_id=my_id,
                               payload=agent.metrics_payload()))
            return 0
        if env.type != protocol.TICK_CMD:
            continue

        tick = env.tick
        if tick != expected_tick:
            logger.error("client %d: out-of-order tick %d (expected %d)",
                         my_id, tick, expected_tick)
            return 1
        expected_tick += 1
        command = env.payload["command"]

        net_ns = 0
        new_buffer = None
        pull_missing = False
        if command == protocol.CMD_PULL_WAYPOINTS_AND_TICK:
            t0 = time.perf_counter_ns()
            reply = _pull(conn, my_id, tick, protocol.KIND_WAYPOINTS)
            net_ns += time.perf_counter_ns() - t0
            if reply.payload.get("available"):
                new_buffer = protocol.buffer_from_dict(reply.payload["item"])
            else:
                pull_missing = True

        t0 = time.perf_counter_ns()
        reply = _pull(conn, my_id, tick, protocol.KIND_OBSERVATION)
        net_ns += time.perf_counter_ns() - t0
        obs = Observation(
            me=protocol.state_from_dict(reply.payload["me"]),
            nearby=[protocol.state_from_dict(o) for o in reply.payload["nearby"]],
        )

        p0 = time.perf_counter_ns()
        control = agent.step(tick, command, obs, new_buffer, pull_missing)
        processing_ns = time.perf_counter_ns() - p0

        conn.send(Envelope(protocol.CLIENT_DONE, tick=tick, sender_id=my_id, payload={
            "control": protocol.control_to_dict(control),
            "timings": {
                "processing_ms": processing_ns / 1e6,
                "network_ms": net_ns / 1e6,
                "barrier_ms": 0.0,
            },
        }))


def _pull(conn: Connection, my_id: int, tick: int, kind: str) -> Envelope:
    conn.send(Envelope(protocol.PULL_REQUEST, tick=tick, sender_id=my_id,
                       payload={"vehicle_id": my_id, "kind": kind}))
    reply = conn.recv()
    if reply is None:
        raise ClientAborted("connection closed during pull")
    if reply.type == protocol.ERROR:
        raise ClientAborted(f"pull rejected: {reply.payload}")
    if reply.type != protocol.PULL_REPLY:
        raise ClientAborted(f"expected PULL_REPLY, got {reply.type}")
    return reply
