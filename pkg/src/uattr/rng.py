"""Stateless, counter-based random numbers.

Every draw is a pure function of an integer key tuple, so two models evaluated
with the same keys see exactly the same noise regardless of call order, batch
composition or dataset size.  The mixer is splitmix64, vectorized over numpy
uint64 arrays.
"""
from __future__ import annotations

import zlib

import numpy as np

_MASK = (1 << 64) - 1
_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)


def tag(name: str) -> int:
    """Stable integer for a purpose string (keeps unrelated streams apart)."""
    return zlib.crc32(name.encode("utf-8"))


def _as_u64(key) -> np.ndarray:
    if isinstance(key, str):
        key = tag(key)
    if isinstance(key, (int, np.integer)):
        return np.array(int(key) & _MASK, dtype=np.uint64)
    arr = np.asarray(key)
    if arr.dtype == np.uint64:
        return arr
    return arr.astype(np.int64).astype(np.uint64)


def _mix(z: np.ndarray) -> np.ndarray:
    z = z + _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _M1
    z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def keyed_bits(*keys) -> np.ndarray:
    """64 random bits per broadcast position of the key arrays."""
    with np.errstate(over="ignore"):
        h = np.array(0x2545F4914F6CDD1D, dtype=np.uint64)
        for k in keys:
            h = _mix(h ^ _mix(_as_u64(k)))
    return h


def derive_seed(*keys) -> int:
    """Collapse a key tuple to a single Python int seed."""
    return int(keyed_bits(*keys)) & ((1 << 63) - 1)


def _counter_bits(*keys, size: int) -> np.ndarray:
    h = keyed_bits(*keys)
    counters = np.arange(size, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return _mix(h[..., None] ^ _mix(counters))


def keyed_uniform(*keys, size: int) -> np.ndarray:
    """Uniform floats in [0, 1) with trailing axis ``size``."""
    bits = _counter_bits(*keys, size=size)
    return (bits >> np.uint64(11)).astype(np.float64) * 2.0**-53


def keyed_normal(*keys, size: int) -> np.ndarray:
    """Standard normals (Box-Muller) with trailing axis ``size``."""
    half = (size + 1) // 2
    bits = _counter_bits(*keys, size=2 * half)
    u = ((bits >> np.uint64(11)).astype(np.float64) + 1.0) * 2.0**-53
    u1, u2 = u[..., :half], u[..., half:]
    r = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([r * np.cos(2 * np.pi * u2), r * np.sin(2 * np.pi * u2)], axis=-1)
    return z[..., :size]


def keyed_integers(*keys, high: int) -> np.ndarray:
    """Integers in [0, high); modulo bias is negligible for desk-scale ``high``."""
    return (keyed_bits(*keys) % np.uint64(high)).astype(np.int64)
