"""Counter-based random stream with explicit (seed, stream) keying.

Philox-4x64 with 10 rounds. Streams keyed by (seed, stream_id) are
statistically independent and reproducible from the key alone, so each
trajectory owns stream_id = trajectory index and replay never depends on
scheduling. The compiled kernel carries an identical implementation; the
two must produce bit-equal output for equal keys.
"""

from __future__ import annotations

import numpy as np

_MASK64 = (1 << 64) - 1
_MULT0 = 0xD2E7470EE14C6C93
_MULT1 = 0xCA5A826395121157
_WEYL0 = 0x9E3779B97F4A7C15
_WEYL1 = 0xBB67AE8584CAA73B
_ROUNDS = 10

# 53-bit mantissa convention: u = (x >> 11) * 2**-53, uniform on [0, 1).
_INV53 = 1.0 / (1 << 53)


def _block(c0: int, c1: int, c2: int, c3: int, k0: int, k1: int) -> tuple[int, int, int, int]:
    """One Philox-4x64 block: 10 rounds with the Weyl key schedule."""
    for r in range(_ROUNDS):
        if r:
            k0 = (k0 + _WEYL0) & _MASK64
            k1 = (k1 + _WEYL1) & _MASK64
        p0 = _MULT0 * c0
        p1 = _MULT1 * c2
        c0, c1, c2, c3 = (
            (p1 >> 64) ^ c1 ^ k0,
            p1 & _MASK64,
            (p0 >> 64) ^ c3 ^ k1,
            p0 & _MASK64,
        )
    return c0, c1, c2, c3


class PhiloxStream:
    """Deterministic uniform stream addressed by (seed, stream_id)."""

    def __init__(self, seed: int, stream_id: int = 0):
        for name, value in (("seed", seed), ("stream_id", stream_id)):
            if not isinstance(value, (int, np.integer)):
                raise TypeError(f"{name} must be an integer")
            if not 0 <= value <= _MASK64:
                raise ValueError(f"{name} must fit in 64 bits, got {value}")
        self.seed = int(seed)
        self.stream_id = int(stream_id)
        self._counter = [0, 0, 0, 0]
        self._buf: tuple[int, int, int, int] = (0, 0, 0, 0)
        self._pos = 4

    def next_raw(self) -> int:
        """Next raw 64-bit output."""
        if self._pos == 4:
            # counter advances before the block, so the first block sits at 1
            c = self._counter
            for i in range(4):
                c[i] = (c[i] + 1) & _MASK64
                if c[i]:
                    break
            self._buf = _block(c[0], c[1], c[2], c[3], self.seed, self.stream_id)
            self._pos = 0
        out = self._buf[self._pos]
        self._pos += 1
        return out

    def uniform(self) -> float:
        """Uniform double on [0, 1)."""
        return (self.next_raw() >> 11) * _INV53

    def raw(self, n: int) -> np.ndarray:
        """Array of the next n raw outputs (for stream-equality tests)."""
        return np.array([self.next_raw() for _ in range(n)], dtype=np.uint64)
