"""Seeded splitmix64 generator used everywhere randomness is needed.

splitmix64 is a counter-based 64-bit mixer: output i is mix(seed + i*GAMMA).
That makes the stream trivially reproducible in any language and lets us
fill whole tensors in one vectorized shot. Floats are derived from the top
53 bits, so the mapping to [0, 1) is exact and platform independent.
"""

from __future__ import annotations

import hashlib

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = 0xBF58476D1CE4E5B9
_MIX2 = 0x94D049BB133111EB
_INV_2_53 = 2.0**-53


def _mix(z: int) -> int:
    z &= _MASK
    z = ((z ^ (z >> 30)) * _MIX1) & _MASK
    z = ((z ^ (z >> 27)) * _MIX2) & _MASK
    return (z ^ (z >> 31)) & _MASK


class SplitMix64:
    """Sequential splitmix64 stream."""

    def __init__(self, seed: int):
        self._state = seed & _MASK

    def next_u64(self) -> int:
        self._state = (self._state + _GAMMA) & _MASK
        return _mix(self._state)

    def uniform(self) -> float:
        """One double in [0, 1) from the top 53 bits."""
        return (self.next_u64() >> 11) * _INV_2_53

    def uniforms(self, n: int) -> np.ndarray:
        """Vectorized batch of n uniforms in [0, 1); advances the stream by n."""
        i = np.arange(1, n + 1, dtype=np.uint64)
        z = np.uint64(self._state) + np.uint64(_GAMMA) * i
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX2)
        z = z ^ (z >> np.uint64(31))
        self._state = (self._state + n * _GAMMA) & _MASK
        return (z >> np.uint64(11)).astype(np.float64) * _INV_2_53

    def choice(self, n: int) -> int:
        """Index in [0, n) with the standard rejection-free multiply trick."""
        return int(self.uniform() * n) if n > 1 else 0


def derive_seed(run_seed: int, *parts: object) -> int:
    """Stable 64-bit sub-seed from a run seed plus arbitrary labels.

    Used to give each corpus record / worker its own stream so that
    parallel evaluation order can never change outputs.
    """
    h = hashlib.sha256()
    h.update(str(int(run_seed)).encode())
    for p in parts:
        h.update(b"\x1f")
        h.update(str(p).encode())
    return int.from_bytes(h.digest()[:8], "little")
