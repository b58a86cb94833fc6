"""Seeded random streams.

All randomness in the package flows through :func:`stream`, which builds a
Philox (counter-based) generator keyed on ``(seed, stream id)``.  Distinct
stream names never share state, so e.g. the data generator and the
mini-batch shuffler cannot interleave draws even when they share a seed.
"""

import numpy as np

STREAMS = {
    "dictionary": 0,
    "codes": 1,
    "noise": 2,
    "init": 3,
    "shuffle": 4,
    "probe": 5,
    "test": 6,
}

_MASK64 = (1 << 64) - 1


def stream(seed: int, name: str) -> np.random.Generator:
    """Return an independent generator for ``(seed, name)``."""
    if name not in STREAMS:
        raise KeyError(f"unknown random stream {name!r}")
    ss = np.random.SeedSequence([int(seed) & _MASK64, STREAMS[name]])
    return np.random.Generator(np.random.Philox(ss))
