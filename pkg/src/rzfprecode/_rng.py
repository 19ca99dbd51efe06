"""Seeded, splittable random streams.

Every stream is addressed by ``(seed, *key)`` through ``SeedSequence.spawn_key``,
so a frame's randomness depends only on its coordinates and never on the
order in which frames are executed.
"""

import numpy as np

# substream purposes within one simulated frame
CHANNEL = 0
PATH_LOSS = 1
SYMBOLS = 2
NOISE = 3


def stream(seed: int, *key: int) -> np.random.Generator:
    ss = np.random.SeedSequence(int(seed), spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def complex_normal(rng: np.random.Generator, shape, variance: float = 1.0) -> np.ndarray:
    """Circularly-symmetric complex Gaussian samples, ``variance/2`` per real part."""
    scale = np.sqrt(variance / 2.0)
    return scale * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
