"""Seed derivation and per-source random streams.

A trial is identified by one 64-bit seed. From it, every randomness source
gets its own generator: the initial point, each network stage, and one
perturbation stream plus one activation stream per agent. Keeping the sources
apart means that changing, say, the channel reliability never shifts the
perturbations an agent draws.
"""

from __future__ import annotations

import hashlib
import struct

import numpy as np

ROLE_INIT = 0
ROLE_NETWORK = 1
ROLE_NETWORK_SHARES = 2
ROLE_PERTURBATION = 3
ROLE_ACTIVATION = 4


def _generator(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(seed, spawn_key=key)))


def trial_seed(master_seed: int, trial: int, cell_key: int | None = None) -> int:
    """64-bit seed for one trial, a hash of the master seed and trial index.

    With ``cell_key`` the seed also depends on the grid cell; without it all
    cells share their trial seeds (common random numbers across the grid).
    """
    key = (trial,) if cell_key is None else (cell_key, trial)
    ss = np.random.SeedSequence(master_seed, spawn_key=key)
    return int(ss.generate_state(1, np.uint64)[0])


def cell_key(c: float, p_c: float) -> int:
    """Order-independent identifier of a ``(c, p_c)`` grid cell."""
    digest = hashlib.blake2b(struct.pack("<dd", float(c), float(p_c)), digest_size=8).digest()
    return int.from_bytes(digest, "little")


class TrialStreams:
    """The independent generators of one trial with ``d`` agents."""

    def __init__(self, seed: int, d: int):
        self.seed = int(seed)
        self.d = d
        self.init = _generator(self.seed, ROLE_INIT)
        self.network = _generator(self.seed, ROLE_NETWORK)
        self.network_shares = _generator(self.seed, ROLE_NETWORK_SHARES)
        self.perturbation = [_generator(self.seed, ROLE_PERTURBATION, i) for i in range(d)]
        self.activation = [_generator(self.seed, ROLE_ACTIVATION, i) for i in range(d)]


class BlockStream:
    """Uniform draws for a batch of trials, prefetched ``chunk`` ticks at a time.

    ``generators[t][a]`` is the generator for trial ``t`` and sub-stream
    ``a``; each tick consumes ``per_tick`` doubles from it. Because
    ``Generator.random`` yields the same sequence whether drawn at once or
    piecewise, the prefetch is invisible to the consumer.
    """

    def __init__(self, generators, per_tick: tuple[int, ...], chunk: int = 256):
        self.generators = generators
        self.per_tick = tuple(per_tick)
        self.chunk = chunk
        self.T = len(generators)
        self.A = len(generators[0]) if self.T else 0
        self._buf = None
        self._start = None

    def at(self, tick: int) -> np.ndarray:
        """Draws for ``tick``, shape ``(T, A) + per_tick``; ticks are consumed in order from 0."""
        if self._buf is None or tick >= self._start + self.chunk:
            self._start = 0 if self._buf is None else self._start + self.chunk
            if not self._start <= tick < self._start + self.chunk:
                raise ValueError("block streams must be read tick by tick from tick 0")
            buf = np.empty((self.T, self.A, self.chunk) + self.per_tick)
            for t, gens in enumerate(self.generators):
                for a, g in enumerate(gens):
                    buf[t, a] = g.random((self.chunk,) + self.per_tick)
            self._buf = buf
        return self._buf[:, :, tick - self._start]
