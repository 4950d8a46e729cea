import random

import pytest

from edgesim.core import ConfigurationError, Waypoint, WaypointBuffer
from edgesim.edge import (
    ClusterProblem,
    Obstacle,
    PlannerInput,
    PlannerVehicle,
    cluster_vehicles,
    edge_run_step,
    generate_waypoints,
    joint_astar,
    validate_plan,
)
from edgesim.world import HighwayTopology

from oracles import best_partition, exhaustive_plan

TOPO = HighwayTopology(num_lanes=4)


def veh(vid, lane=0, s=0.0, v=0.0, target=21.0, vmax=27.0, overtake=True):
    return PlannerVehicle(vid, lane, s, v, target, vmax, overtake)


class TestClustering:
    def test_two_groups_by_position(self):
        vehicles = [veh(i, s=p) for i, p in enumerate([0.0, 5.0, 100.0, 105.0, 110.0])]
        clusters = cluster_vehicles(vehicles, 2, 3, min_headway=7.0)
        assert clusters == [[0, 1], [2, 3, 4]]
        # matches the exhaustive capacity-respecting optimum
        feats = [(p / 7.0,) for p in [0.0, 5.0, 100.0, 105.0, 110.0]]
        expected, _ = best_partition(feats, 2, 3)
        assert {frozenset(c) for c in clusters} == expected

    def test_singleton(self):
        assert cluster_vehicles([veh(0)], 1, 3, min_headway=7.0) == [[0]]

    def test_colocated_capacity_binds(self):
        vehicles = [veh(i, s=50.0) for i in range(4)]
        clusters = cluster_vehicles(vehicles, 2, 3, min_headway=7.0)
        assert sorted(len(c) for c in clusters) == [1, 3]
        assert sorted(vid for c in clusters for vid in c) == [0, 1, 2, 3]

    def test_infeasible_rejected(self):
        with pytest.raises(ConfigurationError):
            cluster_vehicles([veh(i) for i in range(7)], 2, 3, min_headway=7.0)

    def test_every_vehicle_exactly_once(self):
        rng = random.Random(5)
        for _ in range(20):
            n = rng.randint(1, 12)
            vehicles = [veh(i, s=rng.uniform(0, 400)) for i in range(n)]
            k = -(-n // 3)
            clusters = cluster_vehicles(vehicles, k, 3, min_headway=7.0)
            assert sorted(v for c in clusters for v in c) == list(range(n))
            assert all(len(c) <= 3 for c in clusters)

    def test_deterministic(self):
        vehicles = [veh(i, s=17.0 * i) for i in range(9)]
        a = cluster_vehicles(vehicles, 3, 3, min_headway=7.0)
        b = cluster_vehicles(vehicles, 3, 3, min_headway=7.0)
        assert a == b


class TestJointAstar:
    def test_single_vehicle_ramp(self):
        res = joint_astar(ClusterProblem((veh(0, lane=1, v=20.0, target=23.0, vmax=30.0),),
                                         (), TOPO, 10, 0, 0.2))
        assert res.cost == 3
        assert res.actions[0][:4] == ((1, 0), (1, 0), (1, 0), (0, 0))

    def test_at_target_holds(self):
        res = joint_astar(ClusterProblem((veh(0, v=20.0, target=20.0),), (), TOPO, 10, 0, 0.2))
        assert res.cost == 0
        assert all(a == (0, 0) for a in res.actions[0])

    def test_blocked_follower_beats_same_lane(self):
        lead = veh(0, s=20.0, v=10.0, target=10.0, vmax=10.0, overtake=False)
        foll = veh(1, s=13.0, v=10.0, target=15.0)
        cluster = (lead, foll)
        res = joint_astar(ClusterProblem(cluster, (), TOPO, 6, 0, 0.2))
        lane_moves = [a for a in res.actions[1] if a[1] != 0]
        assert lane_moves, "expected the follower to change lanes"
        full_cost, _ = exhaustive_plan(cluster, (), TOPO, 6, 0.2)
        same_lane_cost, _ = exhaustive_plan(cluster, (), TOPO, 6, 0.2,
                                            allow_lane_moves=False)
        assert res.cost == full_cost
        assert full_cost < same_lane_cost

    def test_matches_exhaustive_on_random_instances(self):
        rng = random.Random(2024)
        for trial in range(30):
            n = rng.choice([1, 1, 2])
            steps = rng.choice([2, 3])
            vehicles = []
            s = rng.uniform(0, 5)
            for i in range(n):
                v = float(rng.randint(2, 10))
                vehicles.append(veh(i, lane=rng.randint(0, 2), s=s,
                                    v=v, target=v + rng.randint(-3, 3),
                                    vmax=v + 5.0,
                                    overtake=rng.random() < 0.7))
                s += rng.uniform(8.0, 30.0)
            obstacles = ()
            if rng.random() < 0.4:
                obstacles = (Obstacle(rng.randint(0, 2), s + rng.uniform(8, 20),
                                      float(rng.randint(0, 8))),)
            problem = ClusterProblem(tuple(vehicles), obstacles, TOPO, steps, 0, 0.2)
            res = joint_astar(problem)
            expected, _ = exhaustive_plan(tuple(vehicles), obstacles, TOPO, steps, 0.2)
            if expected == float("inf"):
                assert res.status == "infeasible", f"trial {trial}"
            else:
                assert res.status == "ok" and res.cost == expected, f"trial {trial}"

    def test_too_many_vehicles_rejected(self):
        with pytest.raises(ConfigurationError):
            joint_astar(ClusterProblem(tuple(veh(i, s=10.0 * i) for i in range(4)),
                                       (), TOPO, 4, 0, 0.2))

    def test_deterministic_output(self):
        cluster = tuple(veh(i, s=12.0 * i, v=5.0, target=9.0) for i in range(3))
        a = joint_astar(ClusterProblem(cluster, (), TOPO, 8, 1, 0.2))
        b = joint_astar(ClusterProblem(cluster, (), TOPO, 8, 1, 0.2))
        assert a.actions == b.actions and a.cost == b.cost

    def test_timeout_returns_empty(self):
        # dense start with lane moves allowed: enough branching that the
        # zero deadline trips before the search can finish
        cluster = tuple(veh(i, lane=i % 2, s=9.0 * i, v=4.0, target=14.0)
                        for i in range(3))
        ghosts = tuple(Obstacle(lane, 40.0, 2.0) for lane in range(4))
        problem = ClusterProblem(cluster, ghosts, TOPO, 11, 1, 0.2, deadline=0.0)
        res = joint_astar(problem)
        assert res.status == "timeout" and res.actions == {}


class TestGenerateWaypoints:
    def test_constant_speed_spacing(self):
        inp = PlannerInput(0, (veh(0, v=20.0, target=20.0),), TOPO, 3, 0, 0.2)
        buffers = generate_waypoints({0: ((0, 0),) * 3}, inp)
        assert [p.x for p in buffers[0].points] == [4.0, 8.0, 12.0]
        assert buffers[0].planned_speeds == (20.0, 20.0, 20.0)

    def test_compensation_steps_not_shipped(self):
        inp = PlannerInput(0, (veh(0, v=20.0, target=22.0),), TOPO, 3, 1, 0.2)
        actions = {0: ((0, 0), (1, 0), (1, 0), (0, 0))}
        buf = generate_waypoints(actions, inp)[0]
        assert buf.skip_steps == 1
        assert len(buf.points) == 3
        # first shipped point reflects the hold prefix having elapsed
        assert buf.points[0].x == pytest.approx(20.0 * 0.2 + 21.0 * 0.2)
        assert buf.planned_speeds == (21.0, 22.0, 22.0)

    def test_lane_change_moves_y(self):
        inp = PlannerInput(0, (veh(0, lane=0, v=10.0, target=10.0),), TOPO, 3, 0, 0.2)
        buf = generate_waypoints({0: ((0, 0), (0, 1), (0, 0))}, inp)[0]
        ys = [p.y for p in buf.points]
        assert ys == [1.75, 5.25, 5.25]

    def test_kinematic_consistency(self):
        inp = PlannerInput(0, (veh(0, v=18.0, target=21.0),), TOPO, 5, 0, 0.2)
        buf = generate_waypoints({0: ((1, 0),) * 3 + ((0, 0),) * 2}, inp)[0]
        for k in range(1, len(buf.points)):
            gap = buf.points[k].x - buf.points[k - 1].x
            assert abs(gap - buf.planned_speeds[k] * 0.2) <= 1e-6


def forged_buffer(vid=9, lanes=(0, 0, 0), speeds=(5.0, 5.0, 5.0), xs=(1.0, 2.0, 3.0),
                  generation=0):
    return WaypointBuffer(
        vehicle_id=vid, generation_tick=generation, delivery_tick=generation,
        points=tuple(Waypoint(x, TOPO.lane_center_y(l)) for x, l in zip(xs, lanes)),
        planned_speeds=tuple(speeds))


class TestValidatePlan:
    def test_astar_output_always_passes(self):
        rng = random.Random(7)
        for _ in range(25):
            n = rng.randint(1, 3)
            vehicles = []
            s = 0.0
            for i in range(n):
                v = float(rng.randint(0, 12))
                vehicles.append(veh(i, lane=rng.randint(0, 3), s=s, v=v,
                                    target=v + rng.randint(0, 4), vmax=v + 8.0))
                s += rng.uniform(9.0, 25.0)
            inp = PlannerInput(0, tuple(vehicles), TOPO, 6, rng.choice([0, 1]), 0.2)
            buffers, metrics = edge_run_step(inp, "JOINT_ASTAR")
            assert metrics.violations == 0
            surviving, violations = validate_plan(buffers, TOPO)
            assert violations == [] and len(surviving) == len(buffers)

    def test_two_lane_jump_rejected(self):
        bad = forged_buffer(lanes=(0, 2, 2))
        surviving, violations = validate_plan([bad], TOPO)
        assert surviving == [] and violations[0].kind == "lane_jump"

    def test_lane_out_of_range_rejected(self):
        bad = forged_buffer(lanes=(3, 3, 3))
        bad = WaypointBuffer(bad.vehicle_id, 0, 0,
                             points=tuple(Waypoint(p.x, 100.0) for p in bad.points),
                             planned_speeds=bad.planned_speeds)
        surviving, violations = validate_plan([bad], TOPO)
        assert surviving == [] and violations[0].kind == "lane"

    def test_dv_quantum_rejected(self):
        bad = forged_buffer(speeds=(5.0, 7.5, 7.5))
        surviving, violations = validate_plan([bad], TOPO)
        assert surviving == [] and violations[0].kind == "dv"

    def test_non_monotone_rejected(self):
        bad = forged_buffer(xs=(5.0, 3.0, 6.0))
        surviving, violations = validate_plan([bad], TOPO)
        assert surviving == [] and violations[0].kind == "monotone"

    def test_colliding_pair_both_rejected(self):
        # both individually valid, but same lane within headway at step 1
        a = forged_buffer(vid=1, xs=(10.0, 12.0, 14.0))
        b = forged_buffer(vid=2, xs=(17.0, 18.0, 19.0))
        surviving, violations = validate_plan([a, b], TOPO)
        assert surviving == []
        conflict = [v for v in violations if v.kind == "conflict"]
        assert conflict and set(conflict[0].vehicle_ids) == {1, 2}


class TestEdgeRunStep:
    def test_four_vehicles_two_clusters(self):
        vehicles = tuple(veh(i, s=10.0 * i) for i in range(4))
        inp = PlannerInput(4, vehicles, TOPO, 10, 1, 0.2)
        buffers, metrics = edge_run_step(inp, "CLUSTERED_ASTAR")
        assert len(buffers) == 4
        assert len(metrics.cluster_sizes) <= 2
        assert max(metrics.cluster_sizes) <= 3
        assert metrics.runtime_ms > 0

    def test_none_returns_empty(self):
        vehicles = tuple(veh(i, s=10.0 * i) for i in range(2))
        inp = PlannerInput(0, vehicles, TOPO, 10, 0, 0.2)
        buffers, metrics = edge_run_step(inp, "NONE")
        assert buffers == [] and metrics.n_vehicles == 2

    def test_zero_vehicles(self):
        inp = PlannerInput(0, (), TOPO, 10, 0, 0.2)
        buffers, metrics = edge_run_step(inp, "CLUSTERED_ASTAR")
        assert buffers == [] and metrics.runtime_ms >= 0

    def test_vehicle_at_target_gets_hold_buffer(self):
        inp = PlannerInput(0, (veh(0, v=21.0, target=21.0),), TOPO, 10, 0, 0.2)
        buffers, _ = edge_run_step(inp, "CLUSTERED_ASTAR")
        assert len(buffers) == 1
        assert all(s == 21.0 for s in buffers[0].planned_speeds)

    def test_injected_sleep_shows_in_runtime(self):
        inp = PlannerInput(0, (veh(0),), TOPO, 10, 0, 0.2)
        _, metrics = edge_run_step(inp, "CLUSTERED_ASTAR", inject_sleep_ms=30)
        assert metrics.runtime_ms >= 30.0

    def test_deterministic_buffers(self):
        vehicles = tuple(veh(i, s=11.0 * i, v=3.0, target=9.0) for i in range(4))
        inp = PlannerInput(8, vehicles, TOPO, 10, 1, 0.2)
        a, _ = edge_run_step(inp, "CLUSTERED_ASTAR")
        b, _ = edge_run_step(inp, "CLUSTERED_ASTAR")
        assert a == b
