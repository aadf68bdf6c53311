"""Counter-based random streams.

Every consumer of randomness derives its own Philox stream from a root seed
plus a tuple of subkeys (iteration number, window index, ...), so changing
worker layout or evaluation order never changes the numbers a given consumer
sees.
"""

from __future__ import annotations

import hashlib

import numpy as np


def stream(seed: int, *subkeys) -> np.random.Generator:
    """Independent generator keyed by (seed, *subkeys)."""
    h = hashlib.sha256(repr((int(seed),) + tuple(subkeys)).encode()).digest()
    key = np.frombuffer(h[:16], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
