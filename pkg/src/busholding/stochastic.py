"""Seeded sampling for passenger arrivals and segment speeds.

All randomness goes through :class:`RngStream`, a thin wrapper over numpy's
PCG64 bit generator.  A stream is keyed by ``(seed, stream_id)``; the key is fed
to ``numpy.random.SeedSequence(seed, spawn_key=(stream_id,))`` so distinct
stream ids give statistically independent sequences while the same key always
replays the same draws.
"""

from __future__ import annotations

import numpy as np

DEMAND = 0
TRAFFIC = 1
POLICY = 2
INIT = 3

SPEED_FLOOR = 0.5


class RngStream:
    def __init__(self, seed: int, stream_id: int = 0):
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        ss = np.random.SeedSequence(self.seed & (2**64 - 1), spawn_key=(self.stream_id,))
        self.gen = np.random.Generator(np.random.PCG64(ss))

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    # passthroughs used across the package
    def random(self, size=None):
        return self.gen.random(size)

    def normal(self, loc=0.0, scale=1.0, size=None):
        return self.gen.normal(loc, scale, size)

    def exponential(self, scale=1.0, size=None):
        return self.gen.exponential(scale, size)

    def choice(self, n: int, size: int, replace: bool = False) -> np.ndarray:
        return self.gen.choice(n, size=size, replace=replace)


def sample_arrivals(mu: float, t0: float, t1: float, rng: RngStream) -> list[float]:
    """Homogeneous Poisson arrival times on ``[t0, t1)`` for a rate of ``mu`` per hour."""
    if mu < 0:
        raise ValueError(f"arrival rate must be non-negative, got {mu}")
    if not t1 > t0:
        raise ValueError(f"empty window [{t0}, {t1})")
    if mu == 0:
        return []
    scale = 3600.0 / mu
    out = []
    t = t0
    while True:
        t += rng.gen.exponential(scale)
        if t >= t1:
            return out
        out.append(t)


def clamp_speed(v: float) -> float:
    return max(float(v), SPEED_FLOOR)


def sample_segment_speed(mean: float, sigma: float, rng: RngStream) -> float:
    """Gaussian segment speed with the hourly mean, floored at 0.5 m/s."""
    if not mean > 0:
        raise ValueError(f"mean speed must be positive, got {mean}")
    if sigma < 0:
        raise ValueError(f"speed sigma must be non-negative, got {sigma}")
    if sigma == 0:
        return clamp_speed(mean)
    return clamp_speed(rng.gen.normal(mean, sigma))
