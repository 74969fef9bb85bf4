"""
Portable seeded uniform draws.
Park-Miller minimal-standard generator (multiplier 48271). The recurrence is
integer-exact, so a seed produces the same stream on every platform and
library release; network initialisation and the stub encoder draw from it so
their pinned outputs stay fixed.
"""

from __future__ import annotations

from functools import lru_cache

import numpy as np

MODULUS = 2_147_483_647
MULTIPLIER = 48_271
SEED_MIX = 69_069
SEED_OFFSET = 1_013_904_223
_BLOCK = 4096


def initial_state(seed: int) -> int:
    """Maps any integer seed into [1, MODULUS - 1]."""
    return (int(seed) * SEED_MIX + SEED_OFFSET) % (MODULUS - 1) + 1


@lru_cache(maxsize=1)
def _powers() -> np.ndarray:
    # MULTIPLIER^(j+1) mod MODULUS; state * power stays below 2^62
    out = np.empty(_BLOCK, dtype=np.int64)
    value = 1
    for j in range(_BLOCK):
        value = value * MULTIPLIER % MODULUS
        out[j] = value
    out.setflags(write=False)
    return out


class UniformStream:
    """Sequential draws in (0, 1); `draw(a)` then `draw(b)` equals `draw(a + b)`."""

    def __init__(self, seed: int) -> None:
        self.state = initial_state(seed)

    def draw(self, count: int) -> np.ndarray:
        if count < 0:
            raise ValueError(f"count must be >= 0, got {count}")
        out = np.empty(count, dtype=np.int64)
        powers = _powers()
        for start in range(0, count, _BLOCK):
            n = min(_BLOCK, count - start)
            block = (np.int64(self.state) * powers[:n]) % MODULUS
            out[start:start + n] = block
            self.state = int(block[-1])
        return out / MODULUS

    def symmetric(self, count: int, bound: float) -> np.ndarray:
        """Uniform on (-bound, bound)."""
        return bound * (2.0 * self.draw(count) - 1.0)
