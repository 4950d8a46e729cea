import textwrap

import pytest
import yaml

from edgesim.config import ScenarioError, build_scenario, load_scenario

PAPER_STYLE = textwrap.dedent("""
    world:
      sync_mode: true
      client_port: 2000
      fixed_delta_seconds: &delta 0.05
      seed: 10
      num_lanes: 4

    edge_base: &edge_base
      target_speed: 55
      num_lanes: 4
      edge_dt: 0.200
      search_dt: 2.00
      edge_sets_destination: true

    network:
      model: constant
      latency_ms: 51

    vehicle_base: &vehicle_base
      behavior: &base_behavior
        max_speed: 100
        overtake_allowed: true

    vehicles:
      - <<: *vehicle_base
        spawn_position: [0.0, 1.75, 0.3, 0, 0, 0]
        destination: [900.0, 1.75, 0]
      - <<: *vehicle_base
        spawn_position: [20.0, 5.25, 0.3, 0, 0, 0]
        destination: [900.0, 5.25, 0]
        behavior:
          <<: *base_behavior
          max_speed: 120
          target_speed: 75
""")


class TestLoad:
    def test_anchor_merge_resolves(self, tmp_path):
        path = tmp_path / "scenario.yaml"
        path.write_text(PAPER_STYLE)
        scenario = load_scenario(str(path))
        assert len(scenario.vehicles) == 2
        v0, v1 = scenario.vehicles
        assert v0.lane == 0 and v1.lane == 1
        assert v0.v_target == pytest.approx(55 / 3.6)   # edge_base default
        assert v1.v_target == pytest.approx(75 / 3.6)   # per-vehicle override
        assert v1.max_speed == pytest.approx(120 / 3.6)
        assert v0.overtake_allowed

    def test_clock_ratio_violation_reported_with_path(self):
        raw = yaml.safe_load(PAPER_STYLE)
        raw["world"]["fixed_delta_seconds"] = 0.03
        with pytest.raises(ScenarioError) as err:
            build_scenario(raw)
        assert any("edge_dt" in path for path, _ in err.value.problems)

    def test_missing_vehicles_is_valid_empty_scenario(self):
        scenario = build_scenario({"world": {"seed": 1}})
        assert scenario.vehicles == []

    def test_all_violations_reported_at_once(self):
        raw = yaml.safe_load(PAPER_STYLE)
        raw["world"]["fixed_delta_seconds"] = 0.03
        raw["edge_base"]["algorithm"] = "MAGIC"
        raw["vehicles"][0]["spawn_position"] = [0.0, 99.0, 0, 0, 0, 0]
        with pytest.raises(ScenarioError) as err:
            build_scenario(raw)
        assert len(err.value.problems) >= 3

    def test_lane_mapping_from_y(self):
        raw = yaml.safe_load(PAPER_STYLE)
        raw["vehicles"][0]["spawn_position"] = [5.0, 12.25, 0, 0, 0, 0]
        scenario = build_scenario(raw)
        assert scenario.vehicles[0].lane == 3

    def test_spawn_overlap_rejected(self):
        raw = yaml.safe_load(PAPER_STYLE)
        raw["vehicles"][1]["spawn_position"] = [0.5, 1.75, 0, 0, 0, 0]
        with pytest.raises(ScenarioError) as err:
            build_scenario(raw)
        assert "collision" in str(err.value)

    def test_destination_behind_spawn_rejected(self):
        raw = yaml.safe_load(PAPER_STYLE)
        raw["vehicles"][0]["destination"] = [-10.0, 0, 0]
        with pytest.raises(ScenarioError):
            build_scenario(raw)

    def test_target_above_max_speed_rejected(self):
        raw = yaml.safe_load(PAPER_STYLE)
        raw["vehicles"][0]["behavior"] = {"max_speed": 50, "target_speed": 75}
        with pytest.raises(ScenarioError):
            build_scenario(raw)

    def test_joint_astar_vehicle_limit(self):
        raw = yaml.safe_load(PAPER_STYLE)
        raw["edge_base"]["algorithm"] = "JOINT_ASTAR"
        base = raw["vehicles"][0]
        raw["vehicles"] = [
            dict(base, spawn_position=[30.0 * i, 1.75, 0, 0, 0, 0]) for i in range(4)
        ]
        with pytest.raises(ScenarioError):
            build_scenario(raw)

    def test_shipped_scenarios_load(self):
        import importlib.resources as resources
        for name in ("close_spawn", "open_highway", "twelve_vehicle", "speedup_16"):
            with resources.as_file(
                    resources.files("edgesim") / "scenarios" / f"{name}.yaml") as p:
                scenario = load_scenario(str(p))
            assert scenario.clock.world_dt_s == 0.05

    def test_speed_fields_converted_to_si(self):
        raw = yaml.safe_load(PAPER_STYLE)
        raw["vehicles"][0]["behavior"] = {
            "max_speed": 100, "target_speed": 75, "initial_speed": 36}
        scenario = build_scenario(raw)
        assert scenario.vehicles[0].v0 == 10.0
        assert scenario.vehicles[0].v_target == 75 / 3.6
