"""Seed management: one root seed, named sub-streams.

Every source of randomness in the project (data, init, dropout, flow
sampling, ...) draws from a sub-stream derived from the root seed and a
string name, so experiments that share a root seed differ only where
their configs differ.
"""

import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def substream(root_seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for the named sub-stream."""
    ss = np.random.SeedSequence([root_seed & _MASK64, zlib.crc32(name.encode())])
    return np.random.default_rng(ss)


def derive_seed(root_seed: int, name: str) -> int:
    """64-bit seed for consumers that want an integer (e.g. torch)."""
    ss = np.random.SeedSequence([root_seed & _MASK64, zlib.crc32(name.encode())])
    return int(ss.generate_state(1, dtype=np.uint64)[0])
