"""Edge control plane: clustering, joint A* planning, plan validation, and
waypoint generation.

The planner searches the joint discrete space of per-vehicle velocity and
lane commands. A node is the stacked vector of every vehicle's (velocity,
lane) plus the positions implied by the velocity history; step cost is the
summed post-action deviation from each vehicle's lattice target, so the
objective is exactly the traffic-flow metric. To keep the exponential joint
search tractable, vehicles are first grouped by capacity-constrained
k-means on position (at most ``capacity`` per cluster) and each cluster
plans against the other clusters extrapolated at constant velocity.

All arithmetic that feeds search-state identity is integer (lattice
offsets and their running sums), which makes plans deterministic and
byte-for-byte reproducible for identical inputs.
"""

from __future__ import annotations

import heapq
import itertools
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .core import ConfigurationError, Waypoint, WaypointBuffer
from .world import HighwayTopology

# Per-vehicle actions, index order fixed: it is the lexicographic tie-break
# for equal-cost plans. Velocity and lane moves are mutually exclusive.
ACTIONS = ((0, 0), (1, 0), (-1, 0), (0, 1), (0, -1))

ALGORITHMS = ("CLUSTERED_ASTAR", "JOINT_ASTAR", "NONE")

MAX_JOINT_VEHICLES = 3


@dataclass(frozen=True)
class PlannerVehicle:
    """Vehicle view the planner acts on. ``v_target`` is already snapped to
    the vehicle's 1 m/s lattice, so v_target - v is a whole number."""

    vehicle_id: int
    lane: int
    s: float
    v: float
    v_target: float
    max_speed: float
    overtake_allowed: bool = True


@dataclass(frozen=True)
class Obstacle:
    """Traffic outside the planned cluster, extrapolated at constant v."""

    lane: int
    s: float
    v: float


@dataclass(frozen=True)
class PlannerInput:
    """One invocation's input.

    ``prior_targets`` maps vehicle ids to the (speed, lane) targets each
    vehicle is expected to track during the latency-compensation prefix:
    the edge already shipped those instructions last round, so they are the
    model for the steps the new plan cannot reach in time. ``None`` entries
    (or absent vehicles) are modeled as holding.
    """

    generation_tick: int
    vehicles: tuple
    topology: HighwayTopology
    horizon_steps: int
    compensation_steps: int
    edge_dt_s: float
    prior_targets: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.horizon_steps < 1:
            raise ConfigurationError("horizon_steps must be >= 1")
        if self.compensation_steps < 0:
            raise ConfigurationError("compensation_steps must be >= 0")


@dataclass
class EdgeMetrics:
    """One record per edge invocation, buffered locally and uploaded at END."""

    generation_tick: int
    algorithm: str
    n_vehicles: int
    runtime_ms: float = 0.0
    cluster_sizes: list = field(default_factory=list)
    expanded_nodes: int = 0
    violations: int = 0
    timeout: bool = False
    infeasible_clusters: int = 0


@dataclass
class PlanResult:
    actions: dict               # vehicle_id -> tuple[(dv, dlane), ...]
    cost: int
    expanded: int
    status: str                 # "ok" | "timeout" | "infeasible"


class PlannerTimeout(Exception):
    pass


def _tail_cost(deviation: int) -> int:
    """Cost of closing a deviation of d lattice units on an open road:
    post-action deviations d-1, d-2, ..., 0 sum to d(d-1)/2."""
    return deviation * (deviation - 1) // 2


_MIN_RAMP_SUM_CACHE: dict = {}
_DEV_BOUND_CACHE: dict = {}
_INF = float("inf")


def _min_ramp_sum(steps: int, end: int):
    """Minimal sum of a +/-1-per-step integer profile r_1..r_steps with
    r_0 = 0 and r_steps = end (unbounded below). Infeasible -> inf."""
    key = (steps, end)
    cached = _MIN_RAMP_SUM_CACHE.get(key)
    if cached is not None:
        return cached
    if abs(end) > steps:
        _MIN_RAMP_SUM_CACHE[key] = _INF
        return _INF
    r = 0
    total = 0
    for k in range(1, steps + 1):
        r = max(r - 1, end - (steps - k))
        total += r
    _MIN_RAMP_SUM_CACHE[key] = total
    return total


def _dev_cost_bound(dev: int, end_dev: int, steps: int) -> int:
    """Lower bound on the deviation cost of any profile that starts at
    deviation ``dev``, ends at ``end_dev`` after ``steps`` steps, plus the
    open-road residual of the end state. Deviation can change by at most
    one per step, so each intermediate step is bounded below pointwise."""
    key = (dev, end_dev, steps)
    cached = _DEV_BOUND_CACHE.get(key)
    if cached is not None:
        return cached
    total = 0
    for k in range(1, steps + 1):
        total += max(dev - k, end_dev - (steps - k), 0)
    total += _tail_cost(end_dev)
    _DEV_BOUND_CACHE[key] = total
    return total


# ---------------------------------------------------------------------------
# Clustering

def cluster_vehicles(vehicles, k: int, capacity: int = 3, *,
                     min_headway: float = 7.0,
                     with_target_velocity: bool = False,
                     max_iter: int = 100):
    """Partition vehicles into at most k clusters of size <= capacity.

    Iterated capacity-constrained assignment (optimal per iteration via a
    rectangular assignment problem over ``capacity`` slots per centroid)
    with centroid updates, run to a fixed point or ``max_iter``. Centroids
    start at evenly spaced quantiles of the clustering feature, so the
    procedure is deterministic. The feature is linear position scaled by
    the headway distance; target velocity can be appended as a second
    feature.

    Returns a list of clusters, each a list of vehicle ids sorted by id;
    clusters are ordered by their smallest member id.
    """
    n = len(vehicles)
    if capacity < 1:
        raise ConfigurationError("capacity must be >= 1")
    if k * capacity < n:
        raise ConfigurationError(
            f"infeasible clustering: k={k} x capacity={capacity} < {n} vehicles")
    if n == 0:
        return []
    vehicles = sorted(vehicles, key=lambda veh: veh.vehicle_id)

    cols = [[veh.s / min_headway for veh in vehicles]]
    if with_target_velocity:
        cols.append([veh.v_target for veh in vehicles])
    feats = np.array(cols, dtype=float).T  # (n, f)

    quantiles = [(j + 0.5) / k for j in range(k)]
    centroids = np.stack([np.quantile(feats, q, axis=0) for q in quantiles])

    assign = np.full(n, -1, dtype=int)
    for _ in range(max_iter):
        # n x (k * capacity) slot costs; optimal capacity-respecting assignment.
        dists = ((feats[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        cost = np.repeat(dists, capacity, axis=1)
        row, col = linear_sum_assignment(cost)
        new_assign = np.full(n, -1, dtype=int)
        new_assign[row] = col // capacity
        if np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = feats[assign == j]
            if len(members):
                centroids[j] = members.mean(axis=0)

    clusters = []
    for j in range(k):
        members = [vehicles[i].vehicle_id for i in range(n) if assign[i] == j]
        if members:
            clusters.append(sorted(members))
    clusters.sort(key=lambda c: c[0])
    return clusters


# ---------------------------------------------------------------------------
# Joint A*

@dataclass(frozen=True)
class ClusterProblem:
    """One cluster's search instance.

    ``total_steps`` includes the latency-compensation prefix: the first
    ``forced_steps`` transitions model what the vehicles will do before the
    plan can arrive (tracking their previously shipped targets, or holding)
    and are not shipped. ``forced_targets[j][i]`` is vehicle i's modeled
    (speed, lane) target during prefix step j, or None to hold; an empty
    tuple means all-hold.
    """

    vehicles: tuple
    obstacles: tuple
    topology: HighwayTopology
    total_steps: int
    forced_steps: int
    edge_dt_s: float
    forced_targets: tuple = ()
    deadline: float = math.inf  # time.perf_counter() budget


def joint_astar(problem: ClusterProblem, trace: list = None) -> PlanResult:
    """Minimum-deviation joint plan for one cluster.

    Search state is the per-vehicle lattice offset from its initial
    velocity, the running sum of those offsets (which fixes position), and
    the lane vector. Step cost is the summed post-action deviation from the
    lattice targets; the heuristic sums d(d-1)/2 per vehicle, the exact
    remaining cost for a single unconstrained vehicle, hence admissible and
    consistent for the joint problem. A depth-limited plan is scored with
    that same residual for its end state, so the first zero-deviation state
    popped (with a collision-free hold extension) or the first popped
    depth-limit node is globally optimal. Ties resolve to the
    lexicographically smallest joint-action sequence.
    """
    vehicles = problem.vehicles
    n = len(vehicles)
    if n == 0:
        return PlanResult({}, 0, 0, "ok")
    if n > MAX_JOINT_VEHICLES:
        raise ConfigurationError(
            f"joint A* limited to {MAX_JOINT_VEHICLES} vehicles, got {n}")

    topo = problem.topology
    dt = problem.edge_dt_s
    min_headway = topo.min_headway
    total = problem.total_steps
    forced = problem.forced_steps
    action_index = {a: k for k, a in enumerate(ACTIONS)}
    v0 = tuple(veh.v for veh in vehicles)
    s0 = tuple(veh.s for veh in vehicles)
    vmax = tuple(veh.max_speed for veh in vehicles)
    lane_ok = tuple(veh.overtake_allowed for veh in vehicles)
    target = tuple(round(veh.v_target - veh.v) for veh in vehicles)
    rng = range(n)
    pairs = tuple((i, j) for i in rng for j in rng if i < j)

    # Obstacle trajectories depend on depth only; precompute per step.
    obstacles_at = [
        tuple((obs.lane, obs.s + obs.v * dt * d) for obs in problem.obstacles)
        for d in range(total + 1)
    ]

    tail = _tail_cost

    # Final-position caps for lane-locked vehicles stuck behind same-lane
    # traffic. Staying behind is forced as long as no single step can jump a
    # full 2x-headway gap; the cap turns into a budget on reachable end
    # velocity, which sharpens the heuristic enormously in dense starts.
    caps = [None] * n
    top_speed = max(vmax)
    if problem.obstacles:
        top_speed = max(top_speed, max(abs(o.v) for o in problem.obstacles))
    if top_speed * dt < 2.0 * min_headway:
        for i in rng:
            if lane_ok[i]:
                continue
            bound = None
            for obs in problem.obstacles:
                if obs.lane == vehicles[i].lane and obs.s > s0[i]:
                    final = obs.s + obs.v * dt * total - min_headway
                    bound = final if bound is None else min(bound, final)
            caps[i] = bound
        # Chain the caps through lane-locked cluster members: a capped
        # leader caps its follower one headway further back.
        order = sorted((j for j in rng if not lane_ok[j]),
                       key=lambda j: -s0[j])
        for idx, j in enumerate(order):
            for ahead in order[:idx]:
                if vehicles[ahead].lane == vehicles[j].lane and s0[ahead] > s0[j]:
                    if caps[ahead] is not None:
                        chained = caps[ahead] - min_headway
                        caps[j] = chained if caps[j] is None else min(caps[j], chained)

    def h_vehicle(i, off, s_node, remaining) -> float:
        dev = target[i] - off
        if dev <= 0 or caps[i] is None or remaining == 0:
            return tail(abs(dev))
        budget = math.floor((caps[i] - s_node) / dt - remaining * (v0[i] + off)
                            + 1e-9)
        best = None
        for end_dev in range(max(dev - remaining, 0), dev + remaining + 1):
            if _min_ramp_sum(remaining, dev - end_dev) <= budget:
                best = _dev_cost_bound(dev, end_dev, remaining)
                break
        if best is None:
            return _INF
        return best

    def h(offs, cums, depth) -> float:
        remaining = total - depth
        out = 0.0
        for i in rng:
            if caps[i] is None:
                out += tail(abs(target[i] - offs[i]))
            else:
                s_node = s0[i] + dt * (depth * v0[i] + cums[i])
                out += h_vehicle(i, offs[i], s_node, remaining)
        return out

    def feasible(depth, lanes, pos) -> bool:
        for i, j in pairs:
            if lanes[i] == lanes[j] and abs(pos[i] - pos[j]) < min_headway:
                return False
        for obs_lane, obs_s in obstacles_at[depth]:
            for i in rng:
                if lanes[i] == obs_lane and abs(pos[i] - obs_s) < min_headway:
                    return False
        return True

    def hold_extension_ok(depth, cums, lanes) -> bool:
        cums = list(cums)
        for d in range(depth + 1, total + 1):
            for i in rng:
                cums[i] += target[i]
            pos = tuple(s0[i] + dt * (d * v0[i] + cums[i]) for i in rng)
            if not feasible(d, lanes, pos):
                return False
        return True

    def vehicle_moves(i, off, lane):
        """Valid per-vehicle actions as (action_index, new_off, new_lane),
        in tie-break order."""
        moves = [(0, off, lane)]
        vel = v0[i] + off
        if vel + 1 <= vmax[i] + 1e-9:
            moves.append((1, off + 1, lane))
        if vel - 1 >= -1e-9:
            moves.append((2, off - 1, lane))
        if lane_ok[i]:
            if lane + 1 < topo.num_lanes:
                moves.append((3, off, lane + 1))
            if lane - 1 >= 0:
                moves.append((4, off, lane - 1))
        return moves

    start_offs = (0,) * n
    start_cums = (0,) * n
    start_lanes = tuple(veh.lane for veh in vehicles)

    # Heap entries: (f, path, depth, offs, cums, lanes, g). The path is the
    # joint-action index sequence (base-5 positional encoding preserves the
    # per-vehicle lexicographic order), so equal-f ties resolve to the
    # lexicographically smallest plan and the result is deterministic.
    open_heap = [(h(start_offs, start_cums, 0), (), 0,
                  start_offs, start_cums, start_lanes, 0)]
    best_g: dict = {(0,) + start_offs + start_cums + start_lanes: 0}
    expanded = 0
    nactions = len(ACTIONS)
    deadline_set = problem.deadline != math.inf

    def finish(path, cost, status="ok"):
        per_vehicle = {}
        for i, veh in enumerate(vehicles):
            shift = nactions ** (n - 1 - i)
            seq = tuple(ACTIONS[(code // shift) % nactions] for code in path)
            seq = seq + ((0, 0),) * (total - len(seq))
            per_vehicle[veh.vehicle_id] = seq
        return PlanResult(per_vehicle, cost, expanded, status)

    while open_heap:
        f, path, depth, offs, cums, lanes, g = heapq.heappop(open_heap)
        if g > best_g.get((depth,) + offs + cums + lanes, math.inf):
            continue
        expanded += 1
        if trace is not None:
            trace.append((depth, offs, cums, lanes, f - g))
        if deadline_set and time.perf_counter() > problem.deadline:
            return PlanResult({}, 0, expanded, "timeout")

        # Plan cost includes the residual deviation burden of the end state
        # (zero at a reached goal), i.e. exactly the f the search ordered by.
        if offs == target and hold_extension_ok(depth, cums, lanes):
            return finish(path, g)
        if depth == total:
            return finish(path, g + sum(tail(abs(target[i] - offs[i])) for i in rng))

        new_depth = depth + 1
        if depth < forced:
            # Compensation prefix: the plan cannot arrive before these steps
            # elapse, so they replay the vehicles tracking their in-flight
            # targets exactly the way clients do (lane first, then speed,
            # one quantum per step; no headway pruning; reality is whatever
            # the local controllers actually do).
            code = 0
            new_offs = []
            new_lanes = []
            for i in rng:
                tgt = None
                if problem.forced_targets and depth < len(problem.forced_targets):
                    tgt = problem.forced_targets[depth][i]
                off, lane = offs[i], lanes[i]
                dv, dlane = 0, 0
                if tgt is not None:
                    want_v, want_lane = tgt
                    dlane = max(-1, min(1, want_lane - lane))
                    if dlane == 0:
                        diff = want_v - (v0[i] + off)
                        dv = 1 if diff >= 0.5 else (-1 if diff <= -0.5 else 0)
                vel = v0[i] + off + dv
                if dv != 0 and -1e-9 <= vel <= vmax[i] + 1e-9:
                    off += dv
                    dlane = 0
                elif dlane != 0 and 0 <= lane + dlane < topo.num_lanes:
                    lane += dlane
                    dv = 0
                else:
                    dv, dlane = 0, 0
                code = code * nactions + action_index[(dv, dlane)]
                new_offs.append(off)
                new_lanes.append(lane)
            new_offs = tuple(new_offs)
            new_lanes = tuple(new_lanes)
            new_cums = tuple(cums[i] + new_offs[i] for i in rng)
            step_cost = sum(abs(target[i] - new_offs[i]) for i in rng)
            new_g = g + step_cost
            new_key = (new_depth,) + new_offs + new_cums + new_lanes
            if new_g < best_g.get(new_key, math.inf):
                best_g[new_key] = new_g
                heapq.heappush(open_heap, (
                    new_g + h(new_offs, new_cums, new_depth), path + (code,),
                    new_depth, new_offs, new_cums, new_lanes, new_g))
            continue

        per_vehicle_moves = [vehicle_moves(i, offs[i], lanes[i]) for i in rng]
        for child in itertools.product(*per_vehicle_moves):
            code = 0
            new_offs = []
            new_lanes = []
            for ai, off, lane in child:
                code = code * nactions + ai
                new_offs.append(off)
                new_lanes.append(lane)
            new_offs = tuple(new_offs)
            new_lanes = tuple(new_lanes)
            new_cums = tuple(cums[i] + new_offs[i] for i in rng)
            pos = tuple(s0[i] + dt * (new_depth * v0[i] + new_cums[i]) for i in rng)
            if not feasible(new_depth, new_lanes, pos):
                continue
            step_cost = sum(abs(target[i] - new_offs[i]) for i in rng)
            new_g = g + step_cost
            new_key = (new_depth,) + new_offs + new_cums + new_lanes
            if new_g >= best_g.get(new_key, math.inf):
                continue
            new_f = new_g + h(new_offs, new_cums, new_depth)
            if new_f == _INF:
                continue
            best_g[new_key] = new_g
            heapq.heappush(open_heap, (
                new_f, path + (code,), new_depth,
                new_offs, new_cums, new_lanes, new_g))

    return PlanResult({}, 0, expanded, "infeasible")


# ---------------------------------------------------------------------------
# Waypoint generation and validation

def generate_waypoints(actions: dict, input: PlannerInput) -> list:
    """Simulate action sequences forward and emit one buffer per vehicle.

    The compensation prefix is simulated but not shipped: points start at
    the step matching the plan's earliest possible arrival, and the
    sequences are long enough that ``horizon_steps`` executable points
    remain. ``points[i]`` is the pose at the end of executable step i,
    ``planned_speeds[i]`` the velocity held during it. Delivery ticks are
    assigned later, when the buffer is deposited.
    """
    skip = input.compensation_steps
    buffers = []
    for veh in input.vehicles:
        seq = actions.get(veh.vehicle_id)
        if seq is None:
            continue
        v, lane, s = veh.v, veh.lane, veh.s
        points = []
        speeds = []
        for step, (dv, dlane) in enumerate(seq):
            v += dv
            lane += dlane
            s += v * input.edge_dt_s
            if step >= skip:
                points.append(Waypoint(x=s, y=input.topology.lane_center_y(lane)))
                speeds.append(v)
        buffers.append(WaypointBuffer(
            vehicle_id=veh.vehicle_id,
            generation_tick=input.generation_tick,
            delivery_tick=input.generation_tick,
            points=tuple(points),
            planned_speeds=tuple(speeds),
            skip_steps=skip,
        ))
    return buffers


@dataclass(frozen=True)
class PlanViolation:
    kind: str          # "lane" | "dv" | "monotone" | "conflict"
    vehicle_ids: tuple
    step: int


def _lane_from_y(y: float, topo: HighwayTopology) -> int:
    return round((y - topo.lane_width / 2.0) / topo.lane_width)


def validate_plan(buffers, topology: HighwayTopology):
    """Reject buffers violating topology or pairwise headway.

    Checks, per buffer: lane within the road, at most one lane per step,
    per-step speed change within the +/-1 m/s quantum, monotone
    non-decreasing position. Across buffers
    sharing a generation tick: no two vehicles within the headway distance
    in the same lane at the same step index (both offenders are rejected).
    Returns (surviving buffers, violations).
    """
    violations = []
    rejected = set()

    for buf in buffers:
        lanes = [_lane_from_y(wp.y, topology) for wp in buf.points]
        for i, lane in enumerate(lanes):
            if not (0 <= lane < topology.num_lanes):
                violations.append(PlanViolation("lane", (buf.vehicle_id,), i))
                rejected.add(buf.vehicle_id)
                break
        for i in range(1, len(lanes)):
            if abs(lanes[i] - lanes[i - 1]) > 1:
                violations.append(PlanViolation("lane_jump", (buf.vehicle_id,), i))
                rejected.add(buf.vehicle_id)
                break
        for i in range(1, len(buf.planned_speeds)):
            if abs(buf.planned_speeds[i] - buf.planned_speeds[i - 1]) > 1.0 + 1e-9:
                violations.append(PlanViolation("dv", (buf.vehicle_id,), i))
                rejected.add(buf.vehicle_id)
                break
        for i in range(1, len(buf.points)):
            if buf.points[i].x < buf.points[i - 1].x - 1e-9:
                violations.append(PlanViolation("monotone", (buf.vehicle_id,), i))
                rejected.add(buf.vehicle_id)
                break

    candidates = [b for b in buffers if b.vehicle_id not in rejected]
    for a, b in itertools.combinations(candidates, 2):
        for i in range(min(len(a.points), len(b.points))):
            wa, wb = a.points[i], b.points[i]
            if (_lane_from_y(wa.y, topology) == _lane_from_y(wb.y, topology)
                    and abs(wa.x - wb.x) < topology.min_headway):
                violations.append(
                    PlanViolation("conflict", (a.vehicle_id, b.vehicle_id), i))
                rejected.add(a.vehicle_id)
                rejected.add(b.vehicle_id)
                break

    surviving = [b for b in buffers if b.vehicle_id not in rejected]
    return surviving, violations


# ---------------------------------------------------------------------------
# Full invocation pipeline

def _prior_target(targets, step: int):
    if targets is None or step >= len(targets):
        return None
    return targets[step]


def edge_run_step(input: PlannerInput, algorithm: str, *,
                  capacity: int = 3,
                  timeout_s: float = None,
                  cluster_with_target_velocity: bool = False,
                  inject_sleep_ms: float = 0.0):
    """One edge planning invocation: cluster, plan, generate, validate.

    Returns (validated waypoint buffers, metrics). ``NONE`` produces no
    buffers (the greedy baseline). Clusters that time out or are infeasible
    simply contribute no buffers; the affected vehicles fall back to local
    control until the next invocation.
    """
    if algorithm not in ALGORITHMS:
        raise ConfigurationError(f"unknown edge algorithm {algorithm!r}")
    start = time.perf_counter()
    if timeout_s is None:
        timeout_s = input.edge_dt_s
    metrics = EdgeMetrics(
        generation_tick=input.generation_tick,
        algorithm=algorithm,
        n_vehicles=len(input.vehicles),
    )
    if inject_sleep_ms > 0:
        time.sleep(inject_sleep_ms / 1000.0)

    buffers = []
    if algorithm != "NONE" and input.vehicles:
        by_id = {veh.vehicle_id: veh for veh in input.vehicles}
        if algorithm == "JOINT_ASTAR":
            clusters = [sorted(by_id)]
        else:
            k = math.ceil(len(input.vehicles) / capacity)
            clusters = cluster_vehicles(
                input.vehicles, k, capacity,
                min_headway=input.topology.min_headway,
                with_target_velocity=cluster_with_target_velocity,
            )
        metrics.cluster_sizes = [len(c) for c in clusters]
        deadline = start + timeout_s
        all_actions = {}
        for member_ids in clusters:
            members = tuple(by_id[i] for i in member_ids)
            others = tuple(
                Obstacle(veh.lane, veh.s, veh.v)
                for vid, veh in sorted(by_id.items()) if vid not in member_ids
            )
            forced_targets = tuple(
                tuple(_prior_target(input.prior_targets.get(veh.vehicle_id), j)
                      for veh in members)
                for j in range(input.compensation_steps)
            )
            problem = ClusterProblem(
                vehicles=members,
                obstacles=others,
                topology=input.topology,
                total_steps=input.horizon_steps + input.compensation_steps,
                forced_steps=input.compensation_steps,
                edge_dt_s=input.edge_dt_s,
                forced_targets=forced_targets,
                deadline=deadline,
            )
            result = joint_astar(problem)
            metrics.expanded_nodes += result.expanded
            if result.status == "timeout":
                metrics.timeout = True
                continue
            if result.status == "infeasible":
                metrics.infeasible_clusters += 1
                continue
            all_actions.update(result.actions)
        buffers = generate_waypoints(all_actions, input)
        buffers, violations = validate_plan(buffers, input.topology)
        metrics.violations = len(violations)

    metrics.runtime_ms = (time.perf_counter() - start) * 1000.0
    return buffers, metrics
