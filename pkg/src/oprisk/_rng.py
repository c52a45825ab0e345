"""Counter-based uniform draws.

Every draw is a pure function of ``(seed, stream, counter)``, so trajectory
``i`` sees the same numbers no matter how many other trajectories are
generated or in which order.  The mixer is SplitMix64.
"""
from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_keys(seed: int, streams: np.ndarray) -> np.ndarray:
    """Per-stream 64-bit keys derived from a global seed."""
    base = _mix(np.array([seed & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    return _mix(base + np.asarray(streams, dtype=np.uint64))


def uniforms(keys: np.ndarray, counter: int) -> np.ndarray:
    """One uniform in [0, 1) per key for the given counter value."""
    z = _mix(keys ^ _mix(np.array([counter], dtype=np.uint64)))
    return (z >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)


def derive_seed(*parts: int) -> int:
    """Hash integer parts into a 64-bit seed (order sensitive)."""
    z = np.array([0x5EED], dtype=np.uint64)
    for p in parts:
        z = _mix(z ^ np.array([int(p) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64))
    return int(z[0])
