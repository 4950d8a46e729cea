"""Deterministic kinematic highway world.

Replaces a full 3D environment simulator with the four-state vehicle model:
fixed-timestep integration, atomic lane changes at edge-step boundaries,
safety monitoring, and snapshot queries. A single thread owns the world
(the manager's loop); snapshots handed out are immutable copies.

Two runs with identical scenario, seed, and control streams produce
bit-identical trajectories: there is no hidden randomness and all
iteration is in sorted vehicle-id order.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .core import (
    Control,
    SimClock,
    VehicleState,
    ticks_per_edge_step,
)

# Consecutive stopped ticks behind a stopped leader before a blockage is
# reported. A one-way highway cannot produce head-on deadlock, so this is
# the nearest observable analogue.
T_BLOCK_TICKS = 25


class ScenarioError(ValueError):
    """Invalid spawn layout or vehicle reference."""


class UnknownVehicleError(KeyError):
    pass


@dataclass(frozen=True)
class HighwayTopology:
    num_lanes: int = 4
    lane_width: float = 3.5
    length: float = 10000.0
    min_headway: float = 7.0
    collision_distance: float = 2.0

    def __post_init__(self):
        if self.num_lanes < 1:
            raise ScenarioError("num_lanes must be >= 1")
        if not (0 < self.collision_distance < self.min_headway < self.length):
            raise ScenarioError(
                "require 0 < collision_distance < min_headway < length, got "
                f"{self.collision_distance}, {self.min_headway}, {self.length}"
            )

    def lane_center_y(self, lane: int) -> float:
        return lane * self.lane_width + self.lane_width / 2.0


@dataclass(frozen=True)
class VehicleSpec:
    """Resolved per-vehicle scenario entry (SI units)."""

    vehicle_id: int
    lane: int
    s: float
    v0: float
    v_target: float
    max_speed: float
    destination_s: float
    overtake_allowed: bool = True


@dataclass
class SafetyReport:
    """Per-tick safety observations. Violations are data, never exceptions."""

    tick: int
    headway_violations: list = field(default_factory=list)  # (rear_id, front_id, gap_m)
    lane_violations: list = field(default_factory=list)      # (id, attempted_lane)
    collisions: list = field(default_factory=list)           # (rear_id, front_id)
    blockages: list = field(default_factory=list)            # id

    def empty(self) -> bool:
        return not (self.headway_violations or self.lane_violations
                    or self.collisions or self.blockages)


class World:
    """Owns vehicle states and advances them one fixed step per tick().

    Controls are staged via apply_control() and bind atomically on ticks
    that start a new edge planning step; positions integrate every tick.
    Vehicles reaching their destination are marked done, keep coasting, and
    drop out of safety accounting and neighbor queries while remaining
    queryable.
    """

    def __init__(self, clock: SimClock, topology: HighwayTopology,
                 specs: list, seed: int = 0):
        self.clock = clock
        self.topology = topology
        self.rng_seed = seed
        self._ticks_per_edge = ticks_per_edge_step(clock)
        self.tick_count = 0
        self._vehicles: dict = {}
        self._specs: dict = {}
        self._pending: dict = {}
        self._pending_lane_violations: list = []
        self._stopped_streak: dict = {}
        self.ignored_done_controls = 0

        for spec in specs:
            if not (0 <= spec.lane < topology.num_lanes):
                raise ScenarioError(
                    f"vehicle {spec.vehicle_id}: lane {spec.lane} outside "
                    f"[0, {topology.num_lanes})"
                )
            if spec.vehicle_id in self._vehicles:
                raise ScenarioError(f"duplicate vehicle id {spec.vehicle_id}")
            self._vehicles[spec.vehicle_id] = VehicleState(
                id=spec.vehicle_id, lane=spec.lane, s=spec.s,
                v=spec.v0, v_target=spec.v_target, done=False,
            )
            self._specs[spec.vehicle_id] = spec
            self._stopped_streak[spec.vehicle_id] = 0

        ids = sorted(self._vehicles)
        for i, a in enumerate(ids):
            for b in ids[i + 1:]:
                va, vb = self._vehicles[a], self._vehicles[b]
                if va.lane == vb.lane and abs(va.s - vb.s) < topology.collision_distance:
                    raise ScenarioError(
                        f"vehicles {a} and {b} spawn within collision distance "
                        f"({abs(va.s - vb.s):.2f} m) in lane {va.lane}"
                    )

    # -- queries ----------------------------------------------------------

    def vehicle_ids(self) -> list:
        return sorted(self._vehicles)

    def snapshot(self, vehicle_id: int) -> VehicleState:
        try:
            return self._vehicles[vehicle_id]
        except KeyError:
            raise UnknownVehicleError(vehicle_id) from None

    def states(self) -> list:
        return [self._vehicles[i] for i in sorted(self._vehicles)]

    def active_states(self) -> list:
        return [v for v in self.states() if not v.done]

    def spec(self, vehicle_id: int) -> VehicleSpec:
        return self._specs[vehicle_id]

    def all_done(self) -> bool:
        return bool(self._vehicles) and all(v.done for v in self._vehicles.values())

    def neighbors(self, vehicle_id: int, lookahead_m: float) -> list:
        """Vehicles strictly ahead within lookahead, same or adjacent lane,
        nearest first. Pure read; done vehicles are invisible."""
        me = self.snapshot(vehicle_id)
        out = []
        for other in self.states():
            if other.id == vehicle_id or other.done:
                continue
            if abs(other.lane - me.lane) > 1:
                continue
            ds = other.s - me.s
            if 0 < ds <= lookahead_m:
                out.append(other)
        out.sort(key=lambda v: (v.s - me.s, v.id))
        return out

    def nearby(self, vehicle_id: int, radius_m: float) -> list:
        """Line-of-sight traffic both ahead and behind within radius, same or
        adjacent lane. Clients need rear gaps to judge lane changes."""
        me = self.snapshot(vehicle_id)
        out = []
        for other in self.states():
            if other.id == vehicle_id or other.done:
                continue
            if abs(other.lane - me.lane) > 1:
                continue
            if abs(other.s - me.s) <= radius_m:
                out.append(other)
        out.sort(key=lambda v: (v.s - me.s, v.id))
        return out

    # -- mutation ---------------------------------------------------------

    def apply_control(self, vehicle_id: int, control: Control) -> None:
        """Stage a control for the next tick, clamping boundary violations.

        Out-of-range lane requests are clamped to dlane=0 and recorded as a
        lane violation; dv that would push v below 0 or above the vehicle's
        max speed is clamped to 0. Controls for done vehicles are ignored
        (warning counter), unknown ids raise.
        """
        me = self.snapshot(vehicle_id)
        if me.done:
            self.ignored_done_controls += 1
            return
        dv, dlane = control.dv, control.dlane
        if dlane != 0:
            target_lane = me.lane + dlane
            if not (0 <= target_lane < self.topology.num_lanes):
                self._pending_lane_violations.append((vehicle_id, target_lane))
                dlane = 0
        if dv != 0:
            spec = self._specs[vehicle_id]
            new_v = me.v + dv
            if new_v < 0 or new_v > spec.max_speed + 1e-9:
                dv = 0
        if dv != control.dv or dlane != control.dlane:
            control = dataclasses.replace(control, dv=dv, dlane=dlane)
        self._pending[vehicle_id] = control

    def tick(self) -> SafetyReport:
        """Advance one world step; returns the post-state safety report."""
        apply_edge_controls = (self.tick_count % self._ticks_per_edge == 0)
        dt = self.clock.world_dt_s

        for vid in sorted(self._vehicles):
            state = self._vehicles[vid]
            if state.done:
                # Done vehicles coast at their final speed, out of everyone's way.
                self._vehicles[vid] = dataclasses.replace(state, s=state.s + state.v * dt)
                continue
            v, lane = state.v, state.lane
            if apply_edge_controls:
                control = self._pending.get(vid)
                if control is not None:
                    v = v + control.dv
                    lane = lane + control.dlane
            s = state.s + v * dt
            done = s >= self._specs[vid].destination_s
            self._vehicles[vid] = dataclasses.replace(
                state, v=v, lane=lane, s=s, done=done)

        if apply_edge_controls:
            self._pending.clear()
        self.tick_count += 1
        self.clock = self.clock.at(self.tick_count)

        report = self._safety_report()
        report.lane_violations.extend(self._pending_lane_violations)
        self._pending_lane_violations = []
        return report

    def _safety_report(self) -> SafetyReport:
        report = SafetyReport(tick=self.tick_count)
        active = self.active_states()
        # Small slack so a gap planned exactly at the threshold does not
        # register as a violation through accumulated float noise.
        min_headway = self.topology.min_headway - 1e-9
        collision_d = self.topology.collision_distance - 1e-9

        by_lane: dict = {}
        for state in active:
            by_lane.setdefault(state.lane, []).append(state)

        leaders: dict = {}
        for lane_states in by_lane.values():
            lane_states.sort(key=lambda v: (v.s, v.id))
            for rear, front in zip(lane_states, lane_states[1:]):
                gap = front.s - rear.s
                if rear.id not in leaders:
                    leaders[rear.id] = front
                if gap < min_headway:
                    report.headway_violations.append((rear.id, front.id, gap))
                    if gap < collision_d:
                        report.collisions.append((rear.id, front.id))

        for state in active:
            leader = leaders.get(state.id)
            stopped_behind_stopped = (
                state.v <= 1e-9 and leader is not None and leader.v <= 1e-9
                and leader.s - state.s <= 2.0 * min_headway
            )
            if stopped_behind_stopped:
                self._stopped_streak[state.id] += 1
                if self._stopped_streak[state.id] > T_BLOCK_TICKS:
                    report.blockages.append(state.id)
            else:
                self._stopped_streak[state.id] = 0
        return report
