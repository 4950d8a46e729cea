import pytest

from edgesim.client import (
    AgentConfig,
    Observation,
    VehicleAgent,
    follow_waypoints,
    local_greedy_plan,
)
from edgesim.core import ControlSource, VehicleState, Waypoint, WaypointBuffer
from edgesim import protocol


def cfg(**overrides):
    base = dict(
        vehicle_id=0, v_target=75 / 3.6, v_target_lattice=21.0, max_speed=27.0,
        min_headway=7.0, lookahead_m=75.0, staleness_threshold_ms=400.0,
        world_dt_s=0.05, edge_dt_s=0.2, ticks_per_edge_step=4, num_lanes=4,
        lane_width=3.5, overtake_allowed=True, compute_ms=0.0,
    )
    base.update(overrides)
    return AgentConfig(**base)


def state(vid=0, lane=0, s=0.0, v=0.0, target=75 / 3.6, done=False):
    return VehicleState(id=vid, lane=lane, s=s, v=v, v_target=target, done=done)


def make_buffer(generation=4, skip=1, start_v=0.0, lane=0, start_s=0.0, steps=10,
                lane_width=3.5):
    points = []
    speeds = []
    v, s = start_v, start_s
    for k in range(skip):
        s += v * 0.2
    for k in range(steps):
        v += 1.0
        s += v * 0.2
        points.append(Waypoint(s, lane * lane_width + lane_width / 2))
        speeds.append(v)
    return WaypointBuffer(0, generation, generation + 2, tuple(points),
                          tuple(speeds), skip_steps=skip)


class TestGreedy:
    def test_open_road_accelerates(self):
        control = local_greedy_plan(state(v=10.0), [], cfg())
        assert (control.dv, control.dlane) == (1, 0)
        assert control.source is ControlSource.LOCAL

    def test_at_lattice_target_holds(self):
        control = local_greedy_plan(state(v=21.0), [], cfg())
        assert (control.dv, control.dlane) == (0, 0)

    def test_above_target_slows(self):
        control = local_greedy_plan(state(v=23.0), [], cfg())
        assert control.dv == -1

    def test_slow_leader_triggers_left_change(self):
        me = state(lane=0, s=0.0, v=10.0)
        leader = state(vid=1, lane=0, s=20.0, v=5.0)
        control = local_greedy_plan(me, [leader], cfg())
        assert (control.dv, control.dlane) == (0, 1)

    def test_blocked_left_falls_back_right(self):
        me = state(lane=1, s=50.0, v=10.0)
        leader = state(vid=1, lane=1, s=70.0, v=5.0)
        left_block = state(vid=2, lane=2, s=52.0, v=10.0)
        control = local_greedy_plan(me, [leader, left_block], cfg())
        assert control.dlane == -1

    def test_never_cuts_into_tight_gap(self):
        me = state(lane=0, s=50.0, v=10.0)
        leader = state(vid=1, lane=0, s=60.0, v=5.0)
        for aft in (44.0, 46.0, 49.9):
            blocker = state(vid=2, lane=1, s=aft, v=10.0)
            control = local_greedy_plan(me, [leader, blocker], cfg(num_lanes=2))
            assert control.dlane == 0

    def test_fast_leader_means_keep_ramping(self):
        me = state(lane=0, s=0.0, v=10.0)
        leader = state(vid=1, lane=0, s=15.0, v=21.0)
        control = local_greedy_plan(me, [leader], cfg(overtake_allowed=False))
        assert control.dv == 1

    def test_blocked_column_holds(self):
        # slower-than-target leader, no lanes: hold until braking envelope
        me = state(lane=0, s=0.0, v=5.0)
        leader = state(vid=1, lane=0, s=40.0, v=5.0)
        control = local_greedy_plan(me, [leader], cfg(overtake_allowed=False))
        assert (control.dv, control.dlane) == (0, 0)

    def test_brakes_inside_envelope(self):
        me = state(lane=0, s=0.0, v=10.0)
        leader = state(vid=1, lane=0, s=9.0, v=5.0)
        control = local_greedy_plan(me, [leader], cfg(overtake_allowed=False))
        assert control.dv == -1

    def test_done_vehicle_holds(self):
        control = local_greedy_plan(state(v=10.0, done=True), [], cfg())
        assert (control.dv, control.dlane) == (0, 0)


class TestFollowWaypoints:
    def test_direct_speed_difference(self):
        buf = make_buffer(generation=4, skip=1, start_v=20.0, lane=2)
        me = state(lane=2, v=20.0, s=0.0)
        control, verdict = follow_waypoints(buf, me, 8, [], cfg())
        assert verdict == "ok"
        assert (control.dv, control.dlane) == (1, 0)
        assert control.source is ControlSource.EDGE

    def test_pending_before_first_executable_step(self):
        buf = make_buffer(generation=4, skip=1)
        control, verdict = follow_waypoints(buf, state(), 6, [], cfg())
        assert control is None and verdict == "pending"

    def test_exhausted_past_end(self):
        buf = make_buffer(generation=4, skip=1, steps=2)
        control, verdict = follow_waypoints(buf, state(v=2.0), 4 + 4 * 12, [], cfg())
        assert control is None and verdict == "exhausted"

    def test_lane_jump_invalid(self):
        buf = make_buffer(generation=4, skip=1, lane=2)
        me = state(lane=0, v=0.0)
        control, verdict = follow_waypoints(buf, me, 8, [], cfg())
        assert verdict == "invalid"

    def test_big_dv_invalid(self):
        buf = make_buffer(generation=4, skip=1, start_v=10.0)
        me = state(v=5.0)
        control, verdict = follow_waypoints(buf, me, 8, [], cfg())
        assert verdict == "invalid"

    def test_headway_conflict_invalid(self):
        # waypoint says change into lane 1 where a neighbor sits alongside
        buf = make_buffer(generation=4, skip=1, start_v=0.0, lane=1)
        me = state(lane=0, v=0.0, s=0.0)
        neighbor = state(vid=9, lane=1, s=buf.points[0].x - 0.0, v=1.0)
        nearby = [VehicleState(id=9, lane=1, s=me.s + 2.0, v=1.0, v_target=10.0)]
        control, verdict = follow_waypoints(buf, me, 8, nearby, cfg())
        assert verdict == "invalid"


class TestAgent:
    def obs(self, v=0.0, s=0.0, lane=0):
        return Observation(me=state(v=v, s=s, lane=lane), nearby=[])

    def test_local_when_no_buffer(self):
        agent = VehicleAgent(cfg())
        control = agent.step(0, protocol.CMD_TICK, self.obs())
        assert control.source is ControlSource.LOCAL
        assert agent.counters.local_ticks == 1
        assert agent.mode == "LOCAL_GREEDY"

    def test_edge_source_with_fresh_buffer(self):
        agent = VehicleAgent(cfg())
        buf = make_buffer(generation=4, skip=1, start_v=0.0)
        control = agent.step(6, protocol.CMD_PULL_WAYPOINTS_AND_TICK,
                             self.obs(), new_buffer=buf)
        # not yet due at tick 6; due from tick 8
        control = agent.step(8, protocol.CMD_TICK, self.obs())
        assert control.source is ControlSource.EDGE
        assert agent.mode == "EDGE_ASSISTED"
        assert agent.counters.buffers_consumed == 1
        assert agent.counters.first_use_indices == {1: 1}
        assert agent.counters.consumed_skip_steps == {1: 1}

    def test_pull_miss_counts_fallback(self):
        agent = VehicleAgent(cfg())
        agent.step(0, protocol.CMD_PULL_WAYPOINTS_AND_TICK, self.obs(),
                   new_buffer=None, pull_missing=True)
        assert agent.counters.pull_fallbacks == 1

    def test_stale_buffer_discarded_permanently(self):
        agent = VehicleAgent(cfg())
        buf = make_buffer(generation=0, skip=1)
        # age 450 ms > 400 ms threshold at tick 9
        control = agent.step(9, protocol.CMD_PULL_WAYPOINTS_AND_TICK,
                             self.obs(), new_buffer=buf)
        assert control.source is ControlSource.LOCAL
        assert agent.counters.staleness_fallbacks == 1
        control = agent.step(10, protocol.CMD_TICK, self.obs())
        assert control.source is ControlSource.LOCAL
        assert agent.counters.staleness_fallbacks == 1  # counted once

    def test_staleness_exactness_rule(self):
        # source=EDGE iff a fresh validated buffer exists AND the cursor is
        # in range (first executable step reached, not exhausted)
        agent = VehicleAgent(cfg())
        buf = make_buffer(generation=4, skip=1, start_v=0.0)
        agent.step(6, protocol.CMD_PULL_WAYPOINTS_AND_TICK, self.obs(), new_buffer=buf)
        v = 0.0
        for tick in range(7, 14):
            obs = self.obs(v=v)
            control = agent.step(tick, protocol.CMD_TICK, obs)
            age_ms = (tick - 4) * 50.0
            step = (tick - 4) // 4
            cursor_in_range = buf.skip_steps <= step < buf.skip_steps + len(buf.points)
            expect_edge = age_ms <= 400.0 and cursor_in_range
            assert (control.source is ControlSource.EDGE) == expect_edge, tick
            if agent.active is not None:
                assert age_ms <= 400.0
            if control.dv and tick % 4 == 0:
                v += control.dv

    def test_validation_failure_falls_back(self):
        agent = VehicleAgent(cfg())
        buf = make_buffer(generation=4, skip=1, start_v=10.0)
        control = agent.step(8, protocol.CMD_PULL_WAYPOINTS_AND_TICK,
                             self.obs(v=0.0), new_buffer=buf)
        assert control.source is ControlSource.LOCAL
        assert agent.counters.validation_failures == 1
        assert agent.active is None

    def test_traffic_recorded_every_tick(self):
        agent = VehicleAgent(cfg())
        for tick in range(5):
            agent.step(tick, protocol.CMD_TICK, self.obs(v=10.0))
        assert len(agent.traffic) == 5
        rec = agent.traffic[0]
        assert rec.deviation == pytest.approx(abs(10.0 - 75 / 3.6))

    def test_metrics_payload_round_trips_through_json(self):
        import json
        agent = VehicleAgent(cfg())
        agent.step(0, protocol.CMD_TICK, self.obs(v=3.0))
        payload = json.loads(json.dumps(agent.metrics_payload()))
        assert payload["traffic"][0][2] == 3.0
        assert payload["counters"]["local_ticks"] == 1
