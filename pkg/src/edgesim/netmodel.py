"""Pluggable latency models for V2X communication events.

A model instance represents one directional channel (e.g. edge->vehicles)
and produces one latency sample per communication event. Sampling is
internally locked so concurrent callers still observe a single,
seed-reproducible draw sequence per channel.
"""

from __future__ import annotations

import math
import random
import threading
import zlib

from .core import ConfigurationError

# A "drop" (packet loss) variant is reserved but not implemented: loss is
# out of scope for v1, only latency is evaluated.
MODEL_NAMES = ("constant", "uniform", "distance")


def channel_seed(scenario_seed: int, channel: str) -> int:
    """Stable per-channel RNG seed (hash() is salted, so crc32 instead)."""
    return (scenario_seed << 16) ^ zlib.crc32(channel.encode("utf-8"))


class LatencyModel:
    """Latency source for one directional channel.

    Variants:
      constant(latency_ms)      -- fixed latency
      uniform(lo_ms, hi_ms)     -- seeded uniform draw in [lo, hi]
      distance(base_ms, ms_per_km) -- linear in src/dst separation
    """

    def __init__(self, variant: str, seed: int = 0, **params):
        if variant not in MODEL_NAMES:
            raise ConfigurationError(f"unknown network model {variant!r}")
        self.variant = variant
        self.params = dict(params)
        self._rng = random.Random(seed)
        self._lock = threading.Lock()
        if variant == "constant":
            self._latency = float(params.get("latency_ms", 0.0))
            if self._latency < 0:
                raise ConfigurationError("latency_ms must be >= 0")
        elif variant == "uniform":
            self._lo = float(params.get("lo_ms", 0.0))
            self._hi = float(params.get("hi_ms", self._lo))
            if self._lo < 0 or self._hi < self._lo:
                raise ConfigurationError("uniform bounds require 0 <= lo <= hi")
        else:
            self._base = float(params.get("base_ms", 0.0))
            self._ms_per_km = float(params.get("ms_per_km", 0.0))
            if self._base < 0 or self._ms_per_km < 0:
                raise ConfigurationError("distance parameters must be >= 0")

    def sample(self, src_position=None, dst_position=None) -> float:
        """One latency sample in milliseconds for a communication event."""
        if self.variant == "constant":
            return self._latency
        if self.variant == "uniform":
            with self._lock:
                return self._rng.uniform(self._lo, self._hi)
        return self._base + self._ms_per_km * _distance_km(src_position, dst_position)

    def expected_ms(self) -> float:
        """Expected latency, used to size the planner's compensation steps."""
        if self.variant == "constant":
            return self._latency
        if self.variant == "uniform":
            return (self._lo + self._hi) / 2.0
        return self._base


def _distance_km(src, dst) -> float:
    if src is None or dst is None:
        return 0.0
    return math.dist(tuple(src), tuple(dst)) / 1000.0


def make_latency_model(config: dict, scenario_seed: int, channel: str) -> LatencyModel:
    """Build a channel model from the scenario's ``network:`` section."""
    cfg = dict(config or {})
    variant = cfg.pop("model", "constant")
    cfg.pop("edge_position", None)
    return LatencyModel(variant, seed=channel_seed(scenario_seed, channel), **cfg)
