"""Counter-based random streams.

Every random draw in a run comes from a stream keyed by the master seed plus
a tuple of integers (purpose, frame, object id, ...). Streams are Philox
generators seeded through ``SeedSequence`` spawn keys, so the draws for one
key never depend on how many other streams were consumed before it. This is
what makes serial and threaded execution bit-identical.
"""
import numpy as np

# stream purposes
GUIDE = 1
INIT = 2
ATTRIBUTES = 3
AXIS = 4
CONTACT = 5
VIDEO = 6
NOISE = 7

# noise stages
SHOT = 1
READOUT = 2


def stream(seed, *key):
    """Return an independent generator for ``(seed, *key)``."""
    if seed < 0 or any(k < 0 for k in key):
        raise ValueError("seed and stream key entries must be non-negative")
    ss = np.random.SeedSequence(entropy=int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.Philox(ss))


def unit_vector(rng):
    """Uniformly distributed direction on the unit sphere."""
    while True:
        v = rng.normal(size=3)
        n = np.sqrt(v @ v)
        if n > 1e-12:
            return v / n
