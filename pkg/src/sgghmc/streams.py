"""Counter-based random streams keyed by (seed, member, step, slot).

Every draw is a pure function of its key, so any subset of ensemble members
can be advanced on any worker and still reproduce the serial run bit for bit.
Raw bits come from numpy's Philox4x64 used in counter mode.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import ndtri

# slot layout: per iteration one refresh normal and one coupling uniform,
# then three slots per Hamiltonian sub-step (theta, theta', midpoint)
SLOT_REFRESH = 0
SLOT_COUPLING = 1
SLOT_INIT = 2
_SUBSTEP_BASE = 8

_WORDS_PER_BLOCK = 4
_TWO_M53 = 2.0 ** -53


def substep_slot(k: int, which: int) -> int:
    """Slot for sub-step ``k``; ``which`` is 0 (theta), 1 (theta') or 2 (midpoint)."""
    return _SUBSTEP_BASE + 3 * k + which


@lru_cache(maxsize=256)
def _key_for_seed(seed: int) -> tuple[int, int]:
    state = np.random.SeedSequence(seed).generate_state(2, dtype=np.uint64)
    return int(state[0]), int(state[1])


class CounterRNG:
    """Stateless generator of uniforms and normals addressed by counters."""

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be a nonnegative integer")
        self.seed = int(seed)
        self._key = np.array(_key_for_seed(self.seed), dtype=np.uint64)

    def _raw(self, step: int, slot: int, lo: int, hi: int, width: int) -> np.ndarray:
        blocks = -(-width // _WORDS_PER_BLOCK)
        counter = np.array([lo * blocks, step, slot, 0], dtype=np.uint64)
        bits = np.random.Philox(counter=counter, key=self._key)
        raw = bits.random_raw((hi - lo) * blocks * _WORDS_PER_BLOCK)
        return raw.reshape(hi - lo, blocks * _WORDS_PER_BLOCK)[:, :width]

    def uniform(self, step: int, slot: int, lo: int, hi: int, width: int) -> np.ndarray:
        """Open-interval uniforms of shape ``(hi - lo, width)``."""
        if step < 0 or slot < 0 or not 0 <= lo <= hi:
            raise ValueError("counters must be nonnegative with lo <= hi")
        raw = self._raw(step, slot, lo, hi, width)
        return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * _TWO_M53

    def normal(self, step: int, slot: int, lo: int, hi: int, width: int) -> np.ndarray:
        return ndtri(self.uniform(step, slot, lo, hi, width))


@dataclass(frozen=True)
class StreamView:
    """The draws available to members ``[lo, hi)`` at one iteration.

    When ``single`` is set the leading member axis is dropped, so a lone
    chain with state shape ``(d,)`` receives draws of shape ``(k,)``.
    """

    rng: CounterRNG
    step: int
    lo: int
    hi: int
    single: bool = False

    @classmethod
    def for_member(cls, rng: CounterRNG, member: int, step: int) -> "StreamView":
        return cls(rng, step, member, member + 1, single=True)

    @classmethod
    def for_members(cls, rng: CounterRNG, lo: int, hi: int, step: int) -> "StreamView":
        return cls(rng, step, lo, hi)

    @property
    def size(self) -> int:
        return self.hi - self.lo

    def _shape(self, arr: np.ndarray) -> np.ndarray:
        return arr[0] if self.single else arr

    def normal(self, slot: int, width: int) -> np.ndarray:
        return self._shape(self.rng.normal(self.step, slot, self.lo, self.hi, width))

    def uniform(self, slot: int, width: int) -> np.ndarray:
        return self._shape(self.rng.uniform(self.step, slot, self.lo, self.hi, width))

    def at_step(self, step: int) -> "StreamView":
        return StreamView(self.rng, step, self.lo, self.hi, self.single)
