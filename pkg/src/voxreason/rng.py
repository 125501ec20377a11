"""Counter-based randomness: reproducible streams keyed by integers, not state.

Per-ray jitter, teacher noise, and concept embeddings all need randomness
that is a pure function of (seed, ray id, sample index, ...) so that results
do not depend on evaluation order or batch composition.
"""

import hashlib

import numpy as np

_GAMMA = 0x9E3779B97F4A7C15
_M1 = 0xBF58476D1CE4E5B9
_M2 = 0x94D049BB133111EB
_MASK = (1 << 64) - 1
_U53 = float(1 << 53)


def mix64(x: int) -> int:
    """SplitMix64 finalizer of a 64-bit counter."""
    z = (int(x) + _GAMMA) & _MASK
    z = ((z ^ (z >> 30)) * _M1) & _MASK
    z = ((z ^ (z >> 27)) * _M2) & _MASK
    return z ^ (z >> 31)


def key_of(*parts: int) -> int:
    """Fold integer parts into a single 64-bit key (order-sensitive)."""
    k = 0
    for p in parts:
        k = mix64(k ^ (int(p) & 0xFFFFFFFFFFFFFFFF))
    return k


def uniform(*parts: int) -> float:
    """Deterministic uniform in [0, 1) from integer key parts."""
    return (key_of(*parts) >> 11) / _U53


def uniforms(key: int, n: int) -> np.ndarray:
    """n uniforms from consecutive counters under one key."""
    out = np.empty(n, dtype=np.float64)
    for i in range(n):
        out[i] = (mix64(key ^ i) >> 11) / _U53
    return out


def gaussians(key: int, n: int) -> np.ndarray:
    """n standard normals via Box-Muller on counter pairs."""
    m = (n + 1) // 2
    u1 = np.empty(m)
    u2 = np.empty(m)
    for i in range(m):
        u1[i] = (mix64(key ^ (2 * i)) >> 11) / _U53
        u2[i] = (mix64(key ^ (2 * i + 1)) >> 11) / _U53
    u1 = np.maximum(u1, 1e-300)
    r = np.sqrt(-2.0 * np.log(u1))
    out = np.empty(2 * m)
    out[0::2] = r * np.cos(2.0 * np.pi * u2)
    out[1::2] = r * np.sin(2.0 * np.pi * u2)
    return out[:n]


def name_key(name: str) -> int:
    """Stable 64-bit key for a string (independent of PYTHONHASHSEED)."""
    digest = hashlib.blake2b(name.encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def jitter_grid(seed: int, ray_ids: np.ndarray, k: int) -> np.ndarray:
    """Stratified-sampling jitter, shape (len(ray_ids), k), in [0, 1).

    Entry (r, j) depends only on (seed, ray_ids[r], j).
    """
    ids = np.asarray(ray_ids, dtype=np.uint64)
    s = np.uint64(mix64(seed))
    cols = np.arange(k, dtype=np.uint64)
    with np.errstate(over="ignore"):
        # vectorized splitmix over the (R, k) counter matrix
        z = (ids[:, None] * np.uint64(_GAMMA) ^ s) ^ (cols[None, :] * np.uint64(_M2))
        z = (z + np.uint64(_GAMMA)) & np.uint64(_MASK)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_M1)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_M2)
        z = z ^ (z >> np.uint64(31))
    return (z >> np.uint64(11)).astype(np.float64) / _U53
