"""Portable 64-bit PRNG used for every random draw outside of torch kernels.

The generator is xoshiro256** seeded through splitmix64, so any language
with 64-bit unsigned arithmetic can reproduce the same streams:

* ``splitmix64``: ``x += 0x9E3779B97F4A7C15``; ``z = x``;
  ``z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9``;
  ``z = (z ^ (z >> 27)) * 0x94D049BB133111EB``; output ``z ^ (z >> 31)``.
  Four consecutive outputs form the xoshiro state.
* ``xoshiro256**``: output ``rotl(s1 * 5, 7) * 9``, then the standard
  state transition (shift 17, rotate 45).
* ``uniform()`` is ``(next() >> 11) * 2**-53``.
* ``below(n)`` is Lemire's multiply-shift with rejection, unbiased.
"""

from __future__ import annotations

MASK64 = (1 << 64) - 1


def splitmix64(state: int) -> tuple[int, int]:
    """Advance a splitmix64 state; returns ``(new_state, output)``."""
    state = (state + 0x9E3779B97F4A7C15) & MASK64
    z = state
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return state, z ^ (z >> 31)


def _rotl(x: int, k: int) -> int:
    return ((x << k) | (x >> (64 - k))) & MASK64


class Xoshiro256:
    """xoshiro256** generator. Not thread-safe; one instance per consumer."""

    def __init__(self, seed: int):
        seed &= MASK64
        s = []
        for _ in range(4):
            seed, out = splitmix64(seed)
            s.append(out)
        self.s = s

    def next_u64(self) -> int:
        s0, s1, s2, s3 = self.s
        result = (_rotl((s1 * 5) & MASK64, 7) * 9) & MASK64
        t = (s1 << 17) & MASK64
        s2 ^= s0
        s3 ^= s1
        s1 ^= s2
        s0 ^= s3
        s2 ^= t
        s3 = _rotl(s3, 45)
        self.s = [s0, s1, s2, s3]
        return result

    def uniform(self) -> float:
        return (self.next_u64() >> 11) * (1.0 / (1 << 53))

    def below(self, n: int) -> int:
        """Uniform integer in ``[0, n)``."""
        if n <= 0:
            raise ValueError(f"below() needs n > 0, got {n}")
        m = self.next_u64() * n
        low = m & MASK64
        if low < n:
            threshold = ((1 << 64) - n) % n
            while low < threshold:
                m = self.next_u64() * n
                low = m & MASK64
        return m >> 64

    def randint(self, lo: int, hi: int) -> int:
        """Uniform integer in the closed range ``[lo, hi]``."""
        return lo + self.below(hi - lo + 1)

    def spawn(self) -> int:
        """Draw a fresh 64-bit seed for a derived stream (e.g. torch init)."""
        return self.next_u64()

    def choice_indices(self, population: int, k: int) -> list[int]:
        """``k`` indices drawn with replacement."""
        return [self.below(population) for _ in range(k)]

    def get_state(self) -> list[int]:
        return list(self.s)

    def set_state(self, state: list[int]) -> None:
        if len(state) != 4:
            raise ValueError("xoshiro256 state has four words")
        self.s = [int(v) & MASK64 for v in state]
