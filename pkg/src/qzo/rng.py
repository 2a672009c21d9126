"""Seed-replayable randomness for perturb/restore/update cycles.

The uniform source is splitmix64 run in counter mode: word ``i`` of the
stream seeded with ``s`` is ``mix64(s + (i + 1) * GOLDEN)``, which equals the
classic sequential splitmix64 output and lets any stream position be reached
directly. The first words for seed 0 are the published reference sequence
(0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, ...); tests pin them as vectors.

Standard normals come from the Box-Muller transform applied to
non-overlapping pairs of uniforms, so the normal at position ``p`` is a pure
function of ``(seed, p // 2)`` and a stream can resume mid-pair. The integer
layer replays bit-exactly on any platform; the float transform additionally
depends on libm log/sqrt/cos/sin, which is stable for a given build.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_GOLDEN = 0x9E3779B97F4A7C15
_MIX_A = 0xBF58476D1CE4E5B9
_MIX_B = 0x94D049BB133111EB
_TWO_PI = 2.0 * np.pi
_INV_2POW53 = 2.0**-53

ALGORITHM_ID = "splitmix64-counter+box-muller/1"


def mix64(x: int) -> int:
    """splitmix64 finalizer: a 64-bit bijective mixing function."""
    z = x & _MASK64
    z = ((z ^ (z >> 30)) * _MIX_A) & _MASK64
    z = ((z ^ (z >> 27)) * _MIX_B) & _MASK64
    return (z ^ (z >> 31)) & _MASK64


def raw64(seed: int, index: int) -> int:
    """Raw 64-bit word `index` (0-based) of the stream with the given seed."""
    return mix64((seed + (index + 1) * _GOLDEN) & _MASK64)


def _raw64_block(seed: int, start: int, count: int) -> np.ndarray:
    counters = np.arange(start + 1, start + count + 1, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = np.uint64(seed & _MASK64) + counters * np.uint64(_GOLDEN)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(_MIX_A)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(_MIX_B)
        z ^= z >> np.uint64(31)
    return z


def uniforms(seed: int, start: int, count: int) -> np.ndarray:
    """`count` doubles in the open interval (0, 1) from stream position `start`."""
    words = _raw64_block(seed, start, count)
    return ((words >> np.uint64(11)).astype(np.float64) + 0.5) * _INV_2POW53


def normals_at(seed: int, position: int, n: int) -> np.ndarray:
    """Normals [position, position + n) of a stream, independent of history.

    Pair k of the stream consumes uniform words 2k and 2k+1 and yields the
    cosine branch at position 2k and the sine branch at 2k+1.
    """
    if n < 1:
        raise ValueError("need at least one draw")
    first_pair = position // 2
    n_pairs = (position + n - 1) // 2 - first_pair + 1
    u = uniforms(seed, 2 * first_pair, 2 * n_pairs)
    radius = np.sqrt(-2.0 * np.log(u[0::2]))
    angle = _TWO_PI * u[1::2]
    z = np.empty(2 * n_pairs)
    z[0::2] = radius * np.cos(angle)
    z[1::2] = radius * np.sin(angle)
    offset = position - 2 * first_pair
    return z[offset : offset + n]


def derive_seed(*parts: int) -> int:
    """Deterministic 64-bit hash of integer parts, for per-step/per-run seeds."""
    h = _GOLDEN
    for p in parts:
        h = mix64((h + _GOLDEN) ^ mix64(p & _MASK64))
    return h


class SeededNormalStream:
    """Standard-normal stream addressed by (seed, position).

    Resetting to the same seed replays the identical sequence; a stream must
    not be shared between threads.
    """

    __slots__ = ("seed", "position")

    def __init__(self, seed: int):
        self.seed = seed & _MASK64
        self.position = 0

    def reset(self, seed: int | None = None) -> None:
        if seed is not None:
            self.seed = seed & _MASK64
        self.position = 0

    def normals(self, n: int) -> np.ndarray:
        """Next `n` standard normals; advances the position by `n`."""
        out = normals_at(self.seed, self.position, n)
        self.position += n
        return out
