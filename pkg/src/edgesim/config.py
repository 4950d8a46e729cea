"""Scenario configuration: YAML loading, defaults, and validation.

Scenario files use plain YAML with anchors and merge keys (`<<: *base`),
which safe_load resolves natively. Speeds in config are km/h and are
converted to SI at load; positions are meters. The spawn pose is
[x, y, z, pitch, yaw, roll]: x maps to the linear highway position and y is
binned into a lane index by lane width. Every invariant violation is
reported with its config path, all at once.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import yaml

from .core import ConfigurationError, SimClock, kph_to_mps
from .netmodel import MODEL_NAMES
from .world import HighwayTopology, VehicleSpec

DEFAULT_PORT = 2000

WORLD_DEFAULTS = {
    "sync_mode": True,
    "client_port": DEFAULT_PORT,
    "fixed_delta_seconds": 0.05,
    "seed": 0,
    "num_lanes": 4,
    "lane_width": 3.5,
    "length": 10000.0,
    "min_headway": 7.0,
    "collision_distance": 2.0,
    "max_ticks": 2000,
    "lookahead_m": 75.0,
    "barrier_timeout_s": 30.0,
    "on_disconnect": "abort",       # or "continue"
}

EDGE_DEFAULTS = {
    "algorithm": "CLUSTERED_ASTAR",
    "target_speed": 75.0,           # kph, per-vehicle behavior may override
    "num_lanes": None,              # echo of world.num_lanes when present
    "edge_dt": 0.200,
    "search_dt": 2.00,
    "edge_sets_destination": True,
    "staleness_threshold_ms": 400.0,
    "capacity": 3,
    "planner_timeout_s": None,      # default: one edge period
    "runtime_model": "fixed",       # "fixed": schedule with runtime_ms below;
    "runtime_ms": 0.0,              # "measured": schedule with wall runtime
    "inject_sleep_ms": 0.0,         # artificial planning delay (testing)
    "cluster_with_target_velocity": False,
}

NETWORK_DEFAULTS = {
    "model": "constant",
    "latency_ms": 0.0,
}

BEHAVIOR_DEFAULTS = {
    "max_speed": 100.0,             # kph
    "overtake_allowed": True,
    "initial_speed": 0.0,           # kph
    "compute_ms": 0.0,
}


class ScenarioError(ConfigurationError):
    """All invariant violations for a scenario, each with a config path."""

    def __init__(self, problems):
        self.problems = list(problems)
        super().__init__("; ".join(f"{path}: {msg}" for path, msg in self.problems))


@dataclass
class ScenarioConfig:
    name: str
    world: dict
    edge: dict
    network: dict
    vehicles: list                  # VehicleSpec
    clock: SimClock
    topology: HighwayTopology
    behaviors: dict = field(default_factory=dict)  # vehicle_id -> behavior dict
    source_path: str = ""

    @property
    def seed(self) -> int:
        return int(self.world["seed"])


def _merged(section, defaults: dict, problems, path: str) -> dict:
    out = dict(defaults)
    if section is None:
        return out
    if not isinstance(section, dict):
        problems.append((path, f"expected a mapping, got {type(section).__name__}"))
        return out
    out.update(section)
    return out


def load_scenario(path: str) -> ScenarioConfig:
    """Parse and validate a scenario file; raises ScenarioError listing
    every violation, or yaml.YAMLError with line info on a parse error."""
    with open(path) as fh:
        raw = yaml.safe_load(fh)
    if raw is None:
        raw = {}
    return build_scenario(raw, name=os.path.splitext(os.path.basename(path))[0],
                          source_path=path)


def build_scenario(raw: dict, name: str = "scenario", source_path: str = "") -> ScenarioConfig:
    problems = []
    world = _merged(raw.get("world"), WORLD_DEFAULTS, problems, "world")
    edge = _merged(raw.get("edge_base"), EDGE_DEFAULTS, problems, "edge_base")
    network = _merged(raw.get("network"), NETWORK_DEFAULTS, problems, "network")
    vehicles_raw = raw.get("vehicles") or []

    clock = None
    try:
        clock = SimClock(
            tick=0,
            world_dt_s=float(world["fixed_delta_seconds"]),
            edge_dt_s=float(edge["edge_dt"]),
            search_dt_s=float(edge["search_dt"]),
        )
    except (ConfigurationError, ValueError) as exc:
        problems.append(("world.fixed_delta_seconds/edge_base.edge_dt", str(exc)))

    topology = None
    try:
        topology = HighwayTopology(
            num_lanes=int(world["num_lanes"]),
            lane_width=float(world["lane_width"]),
            length=float(world["length"]),
            min_headway=float(world["min_headway"]),
            collision_distance=float(world["collision_distance"]),
        )
    except (ConfigurationError, ValueError) as exc:
        problems.append(("world", str(exc)))

    if edge["num_lanes"] is not None and int(edge["num_lanes"]) != int(world["num_lanes"]):
        problems.append(("edge_base.num_lanes",
                         f"disagrees with world.num_lanes ({edge['num_lanes']} vs {world['num_lanes']})"))
    if edge["algorithm"] not in ("CLUSTERED_ASTAR", "JOINT_ASTAR", "NONE"):
        problems.append(("edge_base.algorithm", f"unknown algorithm {edge['algorithm']!r}"))
    if int(edge["capacity"]) < 1:
        problems.append(("edge_base.capacity", "must be >= 1"))
    if float(edge["staleness_threshold_ms"]) < 0:
        problems.append(("edge_base.staleness_threshold_ms", "must be >= 0"))
    if edge["runtime_model"] not in ("fixed", "measured"):
        problems.append(("edge_base.runtime_model", "must be 'fixed' or 'measured'"))

    if network.get("model", "constant") not in MODEL_NAMES:
        problems.append(("network.model", f"unknown model {network.get('model')!r}"))
    for key in ("latency_ms", "lo_ms", "hi_ms", "base_ms", "ms_per_km"):
        if key in network and float(network[key]) < 0:
            problems.append((f"network.{key}", "must be >= 0"))
    if "lo_ms" in network and "hi_ms" in network and float(network["lo_ms"]) > float(network["hi_ms"]):
        problems.append(("network.lo_ms", "lo_ms must be <= hi_ms"))

    if int(world["max_ticks"]) < 0:
        problems.append(("world.max_ticks", "must be >= 0"))

    specs = []
    behaviors = {}
    if topology is not None:
        for i, entry in enumerate(vehicles_raw):
            vpath = f"vehicles[{i}]"
            entry = entry or {}
            behavior = _merged(entry.get("behavior"), BEHAVIOR_DEFAULTS, problems,
                               f"{vpath}.behavior")
            behavior.setdefault("target_speed", edge["target_speed"])
            spawn = entry.get("spawn_position")
            if not spawn or len(spawn) < 2:
                problems.append((f"{vpath}.spawn_position",
                                 "need [x, y, z, pitch, yaw, roll]"))
                continue
            x, y = float(spawn[0]), float(spawn[1])
            lane = math.floor(y / topology.lane_width)
            if not (0 <= lane < topology.num_lanes):
                problems.append((f"{vpath}.spawn_position",
                                 f"y={y} maps to lane {lane}, outside [0, {topology.num_lanes})"))
                continue
            destination = entry.get("destination") or [topology.length, 0, 0]
            dest_s = float(destination[0])
            if dest_s <= x:
                problems.append((f"{vpath}.destination", "must lie ahead of spawn"))
            try:
                v_target = kph_to_mps(float(behavior["target_speed"]))
                max_speed = kph_to_mps(float(behavior["max_speed"]))
                v0 = kph_to_mps(float(behavior["initial_speed"]))
            except ValueError as exc:
                problems.append((f"{vpath}.behavior", str(exc)))
                continue
            if v_target > max_speed + 1e-9:
                problems.append((f"{vpath}.behavior.target_speed",
                                 f"target {behavior['target_speed']} kph exceeds max_speed"))
            if v0 > max_speed + 1e-9:
                problems.append((f"{vpath}.behavior.initial_speed", "exceeds max_speed"))
            specs.append(VehicleSpec(
                vehicle_id=i, lane=lane, s=x, v0=v0, v_target=v_target,
                max_speed=max_speed, destination_s=dest_s,
                overtake_allowed=bool(behavior["overtake_allowed"]),
            ))
            behaviors[i] = behavior

        for a in range(len(specs)):
            for b in range(a + 1, len(specs)):
                sa, sb = specs[a], specs[b]
                if sa.lane == sb.lane and abs(sa.s - sb.s) < topology.collision_distance:
                    problems.append((f"vehicles[{sa.vehicle_id}]/vehicles[{sb.vehicle_id}]",
                                     f"spawn within collision distance in lane {sa.lane}"))

    if edge["algorithm"] == "JOINT_ASTAR" and len(specs) > 3:
        problems.append(("edge_base.algorithm",
                         "JOINT_ASTAR is limited to 3 vehicles; use CLUSTERED_ASTAR"))

    if problems:
        raise ScenarioError(problems)
    return ScenarioConfig(
        name=name, world=world, edge=edge, network=network,
        vehicles=specs, clock=clock, topology=topology,
        behaviors=behaviors, source_path=source_path,
    )
