from typing import Dict

import numpy as np

from fractalqos.lib.util import stableHash


def streamSeed(masterSeed: int, name: str) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(masterSeed), stableHash(name)])


class RandomStreams:
    """Named generators derived from one master seed.

    A stream depends only on (master seed, name), so adding an entity leaves
    the draws of every other entity unchanged.
    """

    def __init__(self, masterSeed: int):
        self.masterSeed = int(masterSeed)
        self.streams: Dict[str, np.random.Generator] = {}

    def stream(self, name: str) -> np.random.Generator:
        if name not in self.streams:
            self.streams[name] = np.random.Generator(np.random.PCG64(streamSeed(self.masterSeed, name)))
        return self.streams[name]

    def seedFor(self, name: str) -> int:
        """Integer seed for generators that take a plain seed."""
        return int(streamSeed(self.masterSeed, name).generate_state(1, dtype=np.uint64)[0])
