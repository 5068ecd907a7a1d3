"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("data", "init", "gumbel", "fisher", "split")


class Streams:
    """One independent generator per name, so an ablation only perturbs its own stream."""

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._gens: dict[str, np.random.Generator] = {}

    def __getattr__(self, name: str) -> np.random.Generator:
        if name.startswith("_"):
            raise AttributeError(name)
        return self.get(name)

    def get(self, name: str) -> np.random.Generator:
        if name not in self._gens:
            key = zlib.crc32(name.encode("utf-8"))
            self._gens[name] = np.random.default_rng(np.random.SeedSequence([self.seed, key]))
        return self._gens[name]
