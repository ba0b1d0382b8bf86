"""Reproducible random-number streams.

Every path owns independent substreams derived from a single 64-bit master
seed via ``np.random.SeedSequence([master_seed, stream_id, path_index])``.
SeedSequence hashing is platform-independent, so identical (seed, path)
always yields identical draws, and results cannot depend on how paths are
chunked across workers.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# stream ids; Brownian and jump randomness are deliberately decoupled so that
# a jump-free run consumes exactly the same normal draws as a pure-Brownian one
BROWNIAN = 0
JUMP_TIMES = 1
JUMP_MARKS = 2
NESTED = 3


@dataclass(frozen=True)
class RngSpec:
    """Master seed plus the substream derivation rule."""

    master_seed: int

    def stream(self, stream_id: int, path_index: int) -> np.random.Generator:
        ss = np.random.SeedSequence([int(self.master_seed), int(stream_id), int(path_index)])
        return np.random.default_rng(ss)

    def brownian_normals(self, path_index: int, n_steps: int) -> np.ndarray:
        """The exact normal draws the engine uses for one path (one per step)."""
        return self.stream(BROWNIAN, path_index).standard_normal(n_steps)

    def child(self, tag: int) -> "RngSpec":
        """Derived spec for auxiliary stages (pilot runs, nested oracles)."""
        ss = np.random.SeedSequence([int(self.master_seed), 0x5EED, int(tag)])
        return RngSpec(master_seed=int(ss.generate_state(1, dtype=np.uint64)[0]))
