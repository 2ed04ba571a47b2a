"""Counter-based random streams.

Every stochastic quantity is drawn from a Philox generator whose key is
derived from ``(seed, *indices)``. A task's draws therefore depend only on
its indices, never on which worker ran it or in what order.
"""

from __future__ import annotations

import hashlib

import numpy as np

# toys per independent stream; chunking lets callers parallelize without
# changing any draw
CHUNK = 1 << 16


def stream(seed: int, *indices: int) -> np.random.Generator:
    if seed < 0 or seed >= 2**64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(i) for i in indices))
    return np.random.Generator(np.random.Philox(ss))


def key_to_seed(key: bytes | str) -> int:
    """Map an arbitrary byte string onto a 64-bit seed."""
    if isinstance(key, str):
        key = key.encode()
    return int.from_bytes(hashlib.sha256(key).digest()[:8], "little")


def chunks(n_total: int, size: int = CHUNK):
    """Yield ``(chunk_index, count)`` covering ``n_total`` draws."""
    for i, start in enumerate(range(0, n_total, size)):
        yield i, min(size, n_total - start)
