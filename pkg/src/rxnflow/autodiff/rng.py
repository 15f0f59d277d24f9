"""Named, splittable random streams.

Each stochastic site (parameter init, path noise, time sampling, shuffling)
draws from its own Philox stream keyed by ``(seed, name)``, so adding draws
at one site never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def _name_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


class RngStreams:
    def __init__(self, seed: int):
        self.seed = int(seed)
        self._streams: dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        gen = self._streams.get(name)
        if gen is None:
            ss = np.random.SeedSequence([self.seed, _name_key(name)])
            gen = np.random.Generator(np.random.Philox(ss))
            self._streams[name] = gen
        return gen

    def fork(self, name: str) -> "RngStreams":
        """Independent child family, e.g. one per epoch or per worker."""
        child_seed = int(np.random.SeedSequence([self.seed, _name_key(name)]).generate_state(1)[0])
        return RngStreams(child_seed)

    __getitem__ = stream
