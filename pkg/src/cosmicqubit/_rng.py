"""Counter-based random streams.

Every consumer draws from a stream keyed by (root seed, purpose, index) so that
results never depend on how work is split across workers.
"""

import zlib

import numpy as np

BLOCK = 65536  # muons per sampling block


def _tag(purpose: str) -> int:
    return zlib.crc32(purpose.encode()) & 0x7FFFFFFF


def stream(seed: int, purpose: str, *index: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=(_tag(purpose),) + tuple(int(i) for i in index))
    return np.random.Generator(np.random.PCG64(ss))


def stream_seed(seed: int, purpose: str, *index: int) -> int:
    """A 63-bit integer seed for consumers (numba kernels) that take a plain int."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(_tag(purpose),) + tuple(int(i) for i in index))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))
