"""
Deterministic seed derivation; nothing in the package seeds from the clock.
"""

import zlib

import numpy as np
import torch


def derive_seed(seed: int, *tags: object) -> int:
    """Derive an independent 63-bit seed for a named purpose."""
    entropy = [int(seed) & 0xFFFFFFFF] + [zlib.crc32(str(t).encode()) for t in tags]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))


def torch_generator(seed: int, *tags: object) -> torch.Generator:
    """CPU torch generator seeded for ``tags``."""
    gen = torch.Generator()
    gen.manual_seed(derive_seed(seed, *tags))
    return gen


def numpy_rng(seed: int, *tags: object) -> np.random.Generator:
    return np.random.default_rng(derive_seed(seed, *tags))
