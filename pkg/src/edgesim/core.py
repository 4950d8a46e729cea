"""Shared domain types, unit conversion, and the fixed-step simulation clock.

Everything in this module is an immutable value object: instances can be
copied freely between threads and processes. Simulated time is always
*derived* from the integer tick count (``tick * world_dt_s``) rather than
accumulated, so there is no floating-point drift to reconcile.
"""

from __future__ import annotations

import dataclasses
import enum
import math
from dataclasses import dataclass


class ConfigurationError(ValueError):
    """Inconsistent clock or scenario parameters, detected at load time."""


def kph_to_mps(speed_kph: float) -> float:
    """Convert km/h to m/s. Negative speeds are rejected."""
    if speed_kph < 0:
        raise ValueError(f"speed must be non-negative, got {speed_kph}")
    return speed_kph / 3.6


def mps_to_kph(speed_mps: float) -> float:
    return speed_mps * 3.6


def _exact_multiple(coarse: float, fine: float) -> int:
    """Return coarse/fine as an exact positive integer, or raise.

    Exactness is checked by re-multiplication (|n*fine - coarse| <= 1e-9)
    so that IEEE representations of values like 0.05 and 0.200 pass while
    0.03 vs 0.200 fails.
    """
    if fine <= 0 or coarse <= 0:
        raise ConfigurationError(f"time steps must be positive ({coarse}, {fine})")
    n = round(coarse / fine)
    if n < 1 or abs(n * fine - coarse) > 1e-9:
        raise ConfigurationError(
            f"{coarse} is not an integer multiple of {fine}"
        )
    return n


@dataclass(frozen=True)
class SimClock:
    """Fixed-step clock shared by the world, clients, and the edge.

    ``world_dt_s`` is the world integration step, ``edge_dt_s`` the coarser
    planning step at which controls bind, ``search_dt_s`` the planning
    horizon. Each must be an exact integer multiple of the previous.
    """

    tick: int = 0
    world_dt_s: float = 0.05
    edge_dt_s: float = 0.200
    search_dt_s: float = 2.00

    def __post_init__(self):
        if self.tick < 0:
            raise ConfigurationError("tick must be non-negative")
        _exact_multiple(self.edge_dt_s, self.world_dt_s)
        _exact_multiple(self.search_dt_s, self.edge_dt_s)

    @property
    def sim_time_s(self) -> float:
        return self.tick * self.world_dt_s

    @property
    def world_dt_ms(self) -> float:
        return self.world_dt_s * 1000.0

    def at(self, tick: int) -> "SimClock":
        return dataclasses.replace(self, tick=tick)


def ticks_per_edge_step(clock: SimClock) -> int:
    """World ticks per edge planning step (exact integer or load error)."""
    return _exact_multiple(clock.edge_dt_s, clock.world_dt_s)


def horizon_steps(clock: SimClock) -> int:
    """Edge planning steps in one search horizon (H)."""
    return _exact_multiple(clock.search_dt_s, clock.edge_dt_s)


def latency_to_ticks(latency_ms: float, clock: SimClock) -> int:
    """Ticks a payload takes to traverse the emulated network.

    ceil(latency / world step), with a small epsilon so exact multiples of
    the step do not round up an extra tick.
    """
    if latency_ms < 0:
        raise ValueError(f"latency must be non-negative, got {latency_ms}")
    if latency_ms == 0:
        return 0
    return max(0, math.ceil(latency_ms / clock.world_dt_ms - 1e-9))


class ControlSource(enum.Enum):
    LOCAL = "LOCAL"
    EDGE = "EDGE"


@dataclass(frozen=True)
class Control:
    """One planning-step command.

    ``dv`` is a velocity change in whole m/s, ``dlane`` a lane change; both
    are limited to {-1, 0, +1} and at most one of them may be nonzero in a
    single planning step.
    """

    dv: int = 0
    dlane: int = 0
    source: ControlSource = ControlSource.LOCAL

    def __post_init__(self):
        if self.dv not in (-1, 0, 1):
            raise ValueError(f"dv must be in {{-1,0,1}}, got {self.dv}")
        if self.dlane not in (-1, 0, 1):
            raise ValueError(f"dlane must be in {{-1,0,1}}, got {self.dlane}")
        if self.dv != 0 and self.dlane != 0:
            raise ValueError("at most one of dv, dlane may be nonzero")


HOLD = Control(0, 0, ControlSource.LOCAL)


@dataclass(frozen=True)
class VehicleState:
    """Four-state vehicle model plus identity.

    ``lane`` 0 is the rightmost lane; ``s`` is the linear position along the
    highway in meters and never decreases; ``v`` is the current velocity and
    ``v_target`` the desired one, both m/s.
    """

    id: int
    lane: int
    s: float
    v: float
    v_target: float
    done: bool = False

    def __post_init__(self):
        if self.id < 0 or self.lane < 0:
            raise ValueError("id and lane must be non-negative")
        if self.v < 0:
            raise ValueError(f"velocity must be non-negative, got {self.v}")


def lattice_target(v_target: float, anchor_v: float) -> float:
    """Snap a target velocity onto the 1 m/s lattice anchored at anchor_v.

    Planners act in +/-1 m/s quanta starting from the spawn velocity, so
    fractional targets are planned against the nearest reachable speed.
    Metrics keep using the unrounded target.
    """
    return anchor_v + round(v_target - anchor_v)


@dataclass(frozen=True)
class Waypoint:
    """6-DOF pose. On the highway world z = pitch = roll = yaw = 0 and
    y is the lane center line."""

    x: float
    y: float
    z: float = 0.0
    yaw: float = 0.0
    pitch: float = 0.0
    roll: float = 0.0


@dataclass(frozen=True)
class WaypointBuffer:
    """Edge-generated trajectory for one vehicle.

    ``points[i]`` is the pose at the end of executable edge step i and
    ``planned_speeds[i]`` the velocity the vehicle should hold during that
    step. ``skip_steps`` is the number of latency-compensation steps the
    edge planned before the first shipped point; clients align execution to
    step indices ``skip_steps + i`` relative to ``generation_tick``.
    """

    vehicle_id: int
    generation_tick: int
    delivery_tick: int
    points: tuple
    planned_speeds: tuple
    skip_steps: int = 0

    def __post_init__(self):
        if self.delivery_tick < self.generation_tick:
            raise ValueError("delivery_tick must be >= generation_tick")
        if len(self.points) != len(self.planned_speeds):
            raise ValueError("points and planned_speeds must have equal length")
        if self.skip_steps < 0:
            raise ValueError("skip_steps must be non-negative")

    def __len__(self) -> int:
        return len(self.points)
