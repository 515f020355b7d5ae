"""Deterministic counter-based random streams.

Every random decision in the package (synthetic corpora, epoch shuffles) is
drawn from an explicitly keyed stream so that results depend only on
(seed, key), never on call order or process state.

Construction, fully specified so corpora are reproducible from the docs alone:

* ``mix64`` is the splitmix64 output function
  (``z ^= z>>30; z *= 0xBF58476D1CE4E5B9; z ^= z>>27; z *= 0x94D049BB133111EB;
  z ^= z>>31``, all mod 2**64).
* A stream key is folded from integer tags:
  ``k = 0; for t in tags: k = mix64(k XOR (t*GOLDEN + 1))`` with
  ``GOLDEN = 0x9E3779B97F4A7C15``.
* The xoshiro256++ state of stream ``k`` under master seed ``s`` is obtained
  from the splitmix64 sequence started at ``mix64(s) XOR k``: advance the
  state by GOLDEN four times, mixing each time, to produce s0..s3.
* xoshiro256++ step: ``out = rotl(s0+s3, 23) + s0`` followed by the standard
  state update (t = s1<<17; s2^=s0; s3^=s1; s1^=s2; s0^=s3; s2^=t;
  s3 = rotl(s3, 45)).
* Uniform doubles in [0,1) take the top 53 bits: ``(u >> 11) * 2**-53``.
* Normals use Box-Muller on consecutive uniform pairs, with the first
  uniform shifted to (0,1] via ``((u >> 11) + 1) * 2**-53``.
* Bounded integers in [lo, hi] use ``lo + u % (hi-lo+1)`` (modulo bias is
  below 2**-50 for the tiny ranges used here).
* Permutations are the argsort (stable, ascending) of n raw u64 draws.
"""

from __future__ import annotations

import numpy as np

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_U64 = np.uint64


def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> _U64(30))) * _U64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> _U64(27))) * _U64(0x94D049BB133111EB)
    return z ^ (z >> _U64(31))


def _rotl(x: np.ndarray, k: int) -> np.ndarray:
    return (x << _U64(k)) | (x >> _U64(64 - k))


def stream_key(*tags: int) -> int:
    """Fold integer tags into one 64-bit stream key."""
    k = np.zeros(1, dtype=np.uint64)
    for t in tags:
        t_arr = np.array([int(t) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        k = _mix64(k ^ (t_arr * _GOLDEN + _U64(1)))
    return int(k[0])


class StreamBank:
    """A bank of independent xoshiro256++ generators advanced in lockstep.

    ``keys`` selects one stream per row; block methods return one row of
    output per stream, which is how the synthesizer vectorizes across
    videos/captions while keeping every stream independently reproducible.
    """

    def __init__(self, seed: int, keys):
        keys = np.asarray(keys, dtype=np.uint64).ravel()
        seed_arr = np.array([int(seed) & 0xFFFFFFFFFFFFFFFF], dtype=np.uint64)
        x = _mix64(seed_arr) ^ keys
        state = []
        for _ in range(4):
            x = x + _GOLDEN
            state.append(_mix64(x))
        # all-zero state is invalid for xoshiro; probability ~2**-256, guard anyway
        dead = (state[0] | state[1] | state[2] | state[3]) == 0
        state[0] = np.where(dead, _U64(1), state[0])
        self._s = state
        self.n_streams = keys.size

    def _next(self) -> np.ndarray:
        s0, s1, s2, s3 = self._s
        out = _rotl(s0 + s3, 23) + s0
        t = s1 << _U64(17)
        s2 = s2 ^ s0
        s3 = s3 ^ s1
        s1 = s1 ^ s2
        s0 = s0 ^ s3
        s2 = s2 ^ t
        s3 = _rotl(s3, 45)
        self._s = [s0, s1, s2, s3]
        return out

    def u64_block(self, n: int) -> np.ndarray:
        """(n_streams, n) raw 64-bit words."""
        out = np.empty((n, self.n_streams), dtype=np.uint64)
        for i in range(n):
            out[i] = self._next()
        return out.T.copy()

    def uniform_block(self, n: int) -> np.ndarray:
        """(n_streams, n) doubles in [0, 1)."""
        bits = self.u64_block(n) >> _U64(11)
        return bits.astype(np.float64) * (2.0 ** -53)

    def normal_block(self, n: int) -> np.ndarray:
        """(n_streams, n) standard normals via Box-Muller."""
        m = (n + 1) // 2
        bits = self.u64_block(2 * m) >> _U64(11)
        u1 = (bits[:, 0::2].astype(np.float64) + 1.0) * (2.0 ** -53)  # (0, 1]
        u2 = bits[:, 1::2].astype(np.float64) * (2.0 ** -53)
        r = np.sqrt(-2.0 * np.log(u1))
        theta = 2.0 * np.pi * u2
        out = np.empty((self.n_streams, 2 * m), dtype=np.float64)
        out[:, 0::2] = r * np.cos(theta)
        out[:, 1::2] = r * np.sin(theta)
        return out[:, :n].copy()

    def integer_block(self, n: int, lo: int, hi: int) -> np.ndarray:
        """(n_streams, n) integers uniform over [lo, hi]."""
        if hi < lo:
            raise ValueError(f"empty integer range [{lo}, {hi}]")
        span = _U64(hi - lo + 1)
        return (lo + (self.u64_block(n) % span).astype(np.int64)).astype(np.int64)


class Stream(StreamBank):
    """Single keyed stream with flat (n,) outputs."""

    def __init__(self, seed: int, *tags: int):
        super().__init__(seed, [stream_key(*tags)])

    def u64(self, n: int) -> np.ndarray:
        return self.u64_block(n)[0]

    def uniform(self, n: int) -> np.ndarray:
        return self.uniform_block(n)[0]

    def normal(self, n: int) -> np.ndarray:
        return self.normal_block(n)[0]

    def integers(self, n: int, lo: int, hi: int) -> np.ndarray:
        return self.integer_block(n, lo, hi)[0]

    def permutation(self, n: int) -> np.ndarray:
        """Permutation of range(n): argsort of n raw draws (stable)."""
        return np.argsort(self.u64(n), kind="stable")
