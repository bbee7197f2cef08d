"""Reproducible per-trajectory Brownian increments.

Each trajectory owns a counter-based Philox stream whose 128-bit key is a
SplitMix64 mix of ``(base_seed, trajectory_id)``.  Streams never depend on
how many other streams exist or in which order they are created, so chunked
or threaded simulation reproduces the same increments bit for bit.
"""

from __future__ import annotations

import math

import numpy as np

__all__ = ["NoiseStream", "mix64", "stream_key"]

_MASK = (1 << 64) - 1


def mix64(z: int) -> int:
    """SplitMix64 finalizer: a bijective 64-bit avalanche mixer."""
    z = (z + 0x9E3779B97F4A7C15) & _MASK
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK
    return z ^ (z >> 31)


def stream_key(base_seed: int, trajectory_id: int) -> int:
    s = mix64(int(base_seed) & _MASK)
    t = mix64(s ^ mix64(int(trajectory_id) & _MASK))
    return (s << 64) | t


class NoiseStream:
    """Gaussian increments ``N(0, dt·I_m)`` for one trajectory.

    The sequence is a pure function of ``(base_seed, trajectory_id)`` and the
    number of increments drawn so far; drawing in blocks or one at a time
    yields identical values.
    """

    def __init__(self, base_seed: int, trajectory_id: int, dt: float, m: int = 1):
        if not dt > 0:
            raise ValueError("dt must be positive")
        if not (0 <= int(base_seed) <= _MASK and 0 <= int(trajectory_id) <= _MASK):
            raise ValueError("seed and trajectory id must be unsigned 64-bit integers")
        if int(m) < 1:
            raise ValueError("m must be >= 1")
        self.base_seed = int(base_seed)
        self.trajectory_id = int(trajectory_id)
        self.dt = float(dt)
        self.m = int(m)
        self._sqrt_dt = math.sqrt(self.dt)
        self._gen = np.random.Generator(np.random.Philox(key=stream_key(base_seed, trajectory_id)))

    def standard_normals(self, k: int) -> np.ndarray:
        """Next ``k`` standard normal vectors, shape ``(k, m)``."""
        return self._gen.standard_normal((k, self.m))

    def increments(self, k: int) -> np.ndarray:
        """Next ``k`` Brownian increments, shape ``(k, m)``."""
        return self._sqrt_dt * self.standard_normals(k)

    def next_increment(self) -> np.ndarray:
        return self.increments(1)[0]


def block_normals(streams: list[NoiseStream], k: int) -> np.ndarray:
    """Stack the next ``k`` standard normals of each stream: ``(len(streams), k, m)``."""
    return np.stack([s.standard_normals(k) for s in streams])
