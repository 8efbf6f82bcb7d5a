"""Named deterministic random streams derived from a single master seed.

Every source of randomness in a scenario (dram flips, ASLR draws, page
placement noise, synchronization jitter, side-channel noise) pulls from its
own named substream. Adding or removing draws from one consumer never
perturbs the values another consumer sees.
"""
from __future__ import annotations

import hashlib

import numpy as np

# Canonical substream names used across the simulator.
DRAM = "dram"
ASLR = "aslr"
PLACEMENT = "placement"
SYNC = "sync"
NOISE = "noise"
PROFILE = "profile"


def stream_tag(name: str) -> int:
    """Stable 64-bit tag for a stream name (independent of PYTHONHASHSEED)."""
    digest = hashlib.sha256(name.encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "little")


def substream(master_seed: int, name: str) -> np.random.Generator:
    """Generator for the named substream of ``master_seed``."""
    return np.random.default_rng(np.random.SeedSequence([master_seed, stream_tag(name)]))


class StreamSet:
    """Lazy cache of named substreams for one master seed."""

    def __init__(self, master_seed: int):
        self.master_seed = int(master_seed)
        self._streams: dict[str, np.random.Generator] = {}

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            self._streams[name] = substream(self.master_seed, name)
        return self._streams[name]

    @property
    def dram(self) -> np.random.Generator:
        return self.get(DRAM)

    @property
    def aslr(self) -> np.random.Generator:
        return self.get(ASLR)

    @property
    def placement(self) -> np.random.Generator:
        return self.get(PLACEMENT)

    @property
    def sync(self) -> np.random.Generator:
        return self.get(SYNC)

    @property
    def noise(self) -> np.random.Generator:
        return self.get(NOISE)

    def trial_seed(self, trial: int) -> int:
        """Derived master seed for an independent trial run."""
        return (self.master_seed * 1_000_003 + trial * 7919 + 1) % (2**63)
