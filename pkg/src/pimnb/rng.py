"""Deterministic, independently keyed random streams.

All randomness in the package flows through counter-based Philox generators
keyed by (master seed, purpose, *indices). Each consumer therefore owns a
stream that is reproducible from its key alone and statistically independent
of every other stream: drawing from one never advances another. Normal
variates use numpy's ziggurat sampler on top of the Philox stream, so results
are bit-stable for a fixed numpy version.
"""

import numpy as np

# Purpose codes keep streams for different subsystems disjoint even when the
# trailing indices coincide.
SPATIAL = 0
TEMPORAL = 1
INIT = 2
SHUFFLE = 3
DATAGEN = 4
DEVICE_EPOCH = 5


def stream(master_seed: int, purpose: int, *indices: int) -> np.random.Generator:
    """Return the generator for stream (master_seed, purpose, *indices)."""
    if master_seed < 0:
        raise ValueError(f"master seed must be non-negative, got {master_seed}")
    if any(i < 0 for i in indices):
        raise ValueError(f"stream indices must be non-negative, got {indices}")
    seq = np.random.SeedSequence(entropy=master_seed, spawn_key=(purpose, *indices))
    return np.random.Generator(np.random.Philox(seq))


def derive_seed(master_seed: int, purpose: int, *indices: int) -> int:
    """Collapse a stream key to a single non-negative 63-bit seed."""
    return int(stream(master_seed, purpose, *indices).integers(0, 2**63))
