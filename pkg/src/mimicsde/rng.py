"""Counter-based random number generation for reproducible parallel Monte Carlo.

Every random draw is a pure function of (seed, domain, path index, step index,
draw index), so ensembles are bit-reproducible regardless of how the path loop
is scheduled, and a path can be extended in time without re-drawing its past.
The generator is Philox2x64-10 (Salmon et al., "Parallel random numbers: as
easy as 1, 2, 3"), implemented directly on numpy uint64 arrays so a whole
vector of paths is advanced per call.
"""

from __future__ import annotations

import numpy as np

_U64 = np.uint64
_MASK32 = _U64(0xFFFFFFFF)
_SHIFT32 = _U64(32)

# Philox2x64 multiplier; round keys advance by the golden-ratio Weyl constant.
_PHILOX_M = _U64(0xD2B74407B1CE6E93)
_ROUNDS = 10

# Stream domains keep independent noise sources from colliding.
DOMAIN_BROWNIAN = 0
DOMAIN_DRIVER = 1
DOMAIN_DRIVER_INIT = 2


def _mulhilo(a: np.ndarray, b: np.uint64) -> tuple[np.ndarray, np.ndarray]:
    """Full 128-bit product of uint64 arrays via 32-bit limbs; returns (hi, lo)."""
    lo = a * b
    a_lo = a & _MASK32
    a_hi = a >> _SHIFT32
    b_lo = b & _MASK32
    b_hi = b >> _SHIFT32
    t = a_lo * b_lo
    carry = t >> _SHIFT32
    t = a_hi * b_lo + carry
    s1 = t & _MASK32
    s2 = t >> _SHIFT32
    t = s1 + a_lo * b_hi
    hi = a_hi * b_hi + s2 + (t >> _SHIFT32)
    return hi, lo


_M64 = (1 << 64) - 1


def _splitmix64(z: int) -> int:
    # key whitening in python ints so scalar uint64 overflow never warns
    z = (z + 0x9E3779B97F4A7C15) & _M64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _M64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _M64
    return z ^ (z >> 31)


def _key_schedule(seed: int, domain: int) -> list[np.uint64]:
    k = _splitmix64(seed & _M64) ^ ((domain * 0x9E3779B97F4A7C15) & _M64)
    return [_U64((k + r * 0x9E3779B97F4A7C15) & _M64) for r in range(_ROUNDS)]


def philox2x64(c0: np.ndarray, c1: np.ndarray, keys: list[np.uint64]) -> tuple[np.ndarray, np.ndarray]:
    """Philox2x64-10 block cipher on counter arrays (c0, c1) under a key schedule."""
    c0 = c0.astype(np.uint64, copy=True)
    c1 = c1.astype(np.uint64, copy=True)
    for k in keys:
        hi, lo = _mulhilo(c0, _PHILOX_M)
        c0 = hi ^ k ^ c1
        c1 = lo
    return c0, c1


def _to_unit(u: np.ndarray) -> np.ndarray:
    # top 53 bits, shifted into the open interval (0, 1)
    return ((u >> _U64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def counters(paths: np.ndarray, step: int, block: int, blocks_per_step: int) -> tuple[np.ndarray, np.ndarray]:
    c0 = paths.astype(np.uint64)
    c1 = np.full_like(c0, _U64(step) * _U64(blocks_per_step) + _U64(block))
    return c0, c1


def normals(seed: int, domain: int, paths: np.ndarray, step: int, n: int) -> np.ndarray:
    """Standard normal draws of shape (len(paths), n) for one time step.

    Draw (p, step, j) is independent of every other (path, step, draw) triple;
    Box-Muller turns each Philox block into two exact normals.
    """
    keys = _key_schedule(seed, domain)
    n_blocks = (n + 1) // 2
    out = np.empty((paths.shape[0], 2 * n_blocks))
    for j in range(n_blocks):
        c0, c1 = counters(paths, step, j, n_blocks)
        w0, w1 = philox2x64(c0, c1, keys)
        u1 = _to_unit(w0)
        u2 = _to_unit(w1)
        r = np.sqrt(-2.0 * np.log(u1))
        out[:, 2 * j] = r * np.cos(2.0 * np.pi * u2)
        out[:, 2 * j + 1] = r * np.sin(2.0 * np.pi * u2)
    return out[:, :n]


def uniforms(seed: int, domain: int, paths: np.ndarray, step: int, n: int) -> np.ndarray:
    """Uniform (0,1) draws of shape (len(paths), n) for one time step."""
    keys = _key_schedule(seed, domain)
    n_blocks = (n + 1) // 2
    out = np.empty((paths.shape[0], 2 * n_blocks))
    for j in range(n_blocks):
        c0, c1 = counters(paths, step, j, n_blocks)
        w0, w1 = philox2x64(c0, c1, keys)
        out[:, 2 * j] = _to_unit(w0)
        out[:, 2 * j + 1] = _to_unit(w1)
    return out[:, :n]
