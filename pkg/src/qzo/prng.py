"""XORShift32 generator and Rademacher (+/-1) perturbation streams.

Perturbations are never stored: any stream can be regenerated from its
32-bit seed, which is what makes seed-replay training possible.
"""
from __future__ import annotations

import numba
import numpy as np

MASK32 = 0xFFFFFFFF
# Golden-ratio increment used to spread iteration counters over the state space.
_STEP_MIX = 0x9E3779B9

LAYER_BITS, QUERY_BITS, SAMPLE_BITS = 8, 10, 14


def xorshift32(state: int) -> int:
    """One step of the 13/17/5 recurrence. ``state`` must be nonzero."""
    if state & MASK32 == 0:
        raise ValueError("xorshift32 state must be nonzero")
    state &= MASK32
    state ^= (state << 13) & MASK32
    state ^= state >> 17
    state ^= (state << 5) & MASK32
    return state


class XorShift32:
    """Stateful wrapper, mostly for interactive use and tests."""

    def __init__(self, seed: int):
        if not 0 < seed <= MASK32:
            raise ValueError(f"seed must be a nonzero 32-bit unsigned integer, got {seed}")
        self.state = seed

    def next(self) -> int:
        self.state = xorshift32(self.state)
        return self.state

    def rademacher(self) -> int:
        return -1 if self.next() & 1 else 1


@numba.njit(cache=True)
def _fill(seeds, n, out):
    # numba widens shifted uint32 values, so mask back to 32 bits each time
    mask = np.uint64(MASK32)
    for k in range(seeds.shape[0]):
        s = np.uint64(seeds[k])
        for i in range(n):
            s = (s ^ (s << np.uint64(13))) & mask
            s = s ^ (s >> np.uint64(17))
            s = (s ^ (s << np.uint64(5))) & mask
            out[k, i] = -1 if (s & np.uint64(1)) else 1


def _check_seeds(seeds: np.ndarray):
    if seeds.size and (seeds.min() <= 0 or seeds.max() > MASK32):
        raise ValueError("seeds must be nonzero 32-bit unsigned integers")


def rademacher_fill(seed: int, n: int) -> np.ndarray:
    """``n`` Rademacher values from the stream seeded by ``seed`` (int8 array).

    Element ``i`` is -1 when the ``i``-th generator output has its low bit
    set and +1 otherwise.
    """
    return rademacher_fill_many([seed], n)[0]


def rademacher_fill_many(seeds, n: int) -> np.ndarray:
    """One independent stream per seed, stacked into a ``(len(seeds), n)`` array."""
    if n < 0:
        raise ValueError(f"n must be nonnegative, got {n}")
    seeds = np.asarray(seeds, dtype=np.int64).reshape(-1)
    _check_seeds(seeds)
    out = np.empty((seeds.size, n), dtype=np.int8)
    _fill(seeds.astype(np.uint32), n, out)
    return out


def step_seed(base_seed: int, iteration: int) -> int:
    """Per-iteration base seed."""
    if not 0 < base_seed <= MASK32:
        raise ValueError(f"base seed must be a nonzero 32-bit unsigned integer, got {base_seed}")
    s = (base_seed ^ ((iteration + 1) * _STEP_MIX)) & MASK32
    return xorshift32(s) if s else 1


def derive_seed(base_seed: int, layer: int, query: int, sample: int = 0) -> int:
    """Seed of the perturbation for one (layer, query, sample) tuple.

    The tuple is packed into 32 bits (8/10/14), xored into the base seed and
    pushed through one generator step, which is a bijection on nonzero
    states. A zero result is remapped to 1.
    """
    if not 0 <= layer < 1 << LAYER_BITS:
        raise ValueError(f"layer index {layer} does not fit in {LAYER_BITS} bits")
    if not 0 <= query < 1 << QUERY_BITS:
        raise ValueError(f"query index {query} does not fit in {QUERY_BITS} bits")
    if not 0 <= sample < 1 << SAMPLE_BITS:
        raise ValueError(f"sample index {sample} does not fit in {SAMPLE_BITS} bits")
    code = (layer << (QUERY_BITS + SAMPLE_BITS)) | (query << SAMPLE_BITS) | sample
    s = (base_seed ^ code) & MASK32
    return xorshift32(s) if s else 1


def derive_seeds(base_seed: int, layer: int, query: int, samples) -> np.ndarray:
    return np.array([derive_seed(base_seed, layer, query, int(n)) for n in samples], dtype=np.int64)
