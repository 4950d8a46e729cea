import pytest

from edgesim.core import ConfigurationError
from edgesim.netmodel import LatencyModel, make_latency_model


class TestConstant:
    def test_exemplar_latency(self):
        assert LatencyModel("constant", latency_ms=51).sample() == 51.0

    def test_zero(self):
        assert LatencyModel("constant", latency_ms=0).sample() == 0.0

    def test_negative_rejected(self):
        with pytest.raises(ConfigurationError):
            LatencyModel("constant", latency_ms=-1)


class TestUniform:
    def test_bounds_hold_over_many_draws(self):
        model = LatencyModel("uniform", seed=7, lo_ms=10, hi_ms=40)
        for _ in range(10_000):
            assert 10.0 <= model.sample() <= 40.0

    def test_reproducible_sequence(self):
        a = LatencyModel("uniform", seed=123, lo_ms=0, hi_ms=100)
        b = LatencyModel("uniform", seed=123, lo_ms=0, hi_ms=100)
        assert [a.sample() for _ in range(100)] == [b.sample() for _ in range(100)]

    def test_different_seed_differs(self):
        a = LatencyModel("uniform", seed=1, lo_ms=0, hi_ms=100)
        b = LatencyModel("uniform", seed=2, lo_ms=0, hi_ms=100)
        assert [a.sample() for _ in range(10)] != [b.sample() for _ in range(10)]

    def test_bad_bounds_rejected(self):
        with pytest.raises(ConfigurationError):
            LatencyModel("uniform", lo_ms=10, hi_ms=5)


class TestDistance:
    def test_linear_in_distance(self):
        model = LatencyModel("distance", base_ms=10, ms_per_km=5)
        assert model.sample((0.0, 0.0), (2000.0, 0.0)) == 20.0

    def test_missing_positions_fall_back_to_base(self):
        model = LatencyModel("distance", base_ms=10, ms_per_km=5)
        assert model.sample() == 10.0

    def test_expected_is_base(self):
        assert LatencyModel("distance", base_ms=10, ms_per_km=5).expected_ms() == 10.0


class TestFactory:
    def test_from_config_section(self):
        model = make_latency_model({"model": "constant", "latency_ms": 51},
                                   scenario_seed=10, channel="down")
        assert model.sample() == 51.0

    def test_channels_get_independent_streams(self):
        cfg = {"model": "uniform", "lo_ms": 0, "hi_ms": 100}
        up = make_latency_model(cfg, 10, "up")
        down = make_latency_model(cfg, 10, "down")
        assert [up.sample() for _ in range(5)] != [down.sample() for _ in range(5)]

    def test_unknown_model_rejected(self):
        with pytest.raises(ConfigurationError):
            make_latency_model({"model": "quantum"}, 0, "up")

    def test_expected_values(self):
        assert make_latency_model({"model": "constant", "latency_ms": 51}, 0, "d").expected_ms() == 51
        assert make_latency_model({"model": "uniform", "lo_ms": 10, "hi_ms": 30}, 0, "d").expected_ms() == 20
