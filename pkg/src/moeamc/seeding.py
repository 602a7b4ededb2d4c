"""Counter-based seed derivation.

Every random stream in the package comes from ``mix(seed, index)``, so any
single draw (one example, one epoch shuffle) is reproducible in isolation.
"""

import numpy as np

MASK64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15

# role constants for seeds derived from a master seed
ROLE_DATASET = 0x44415441
ROLE_SPLIT = 0x53504C54
ROLE_INIT = 0x494E4954
ROLE_TRAIN = 0x5452414E


def splitmix64(x: int) -> int:
    z = (x + GOLDEN) & MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def mix(seed: int, index: int) -> int:
    return splitmix64((seed & MASK64) ^ splitmix64(index & MASK64))


def stream(seed: int, index: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(mix(seed, index)))
