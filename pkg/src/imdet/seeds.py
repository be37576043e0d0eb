"""Sub-seed derivation.

All randomness in a run flows from one user seed; each subsystem draws from
`seed + OFFSET` so runs are reproducible and subsystems stay decoupled.
Dataset generation additionally derives per-sample seeds as `seed + index`
so samples can be produced in any order (or in parallel workers) without
changing the output.
"""

import numpy as np

# Fixed offsets, one per subsystem. Never reuse a value.
OFF_PARAM_INIT = 1_000_003
OFF_TRAIN_SAMPLER = 2_000_003
OFF_AUGMENT = 3_000_003
OFF_EVAL = 4_000_003
OFF_BASELINE = 5_000_003
OFF_EXPORT = 6_000_003


def rng_for(seed: int, offset: int = 0) -> np.random.Generator:
    """Deterministic generator for (seed, subsystem offset)."""
    return np.random.default_rng(int(seed) + int(offset))


def sample_seed(base_seed: int, index: int) -> int:
    """Per-sample seed used for class draw, description and synthesis."""
    return int(base_seed) + int(index)
