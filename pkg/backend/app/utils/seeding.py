"""
Named sub-seeds derived from the single run seed
"""
import numpy as np

# Stable names; changing one changes every artifact that depends on it
GENERATION = "generation"
TRAINING = "training"
BENCHMARK = "benchmark"
VALIDATION = "validation"
CE_TWIN = "ce"


def sub_seed(seed: int, name: str) -> int:
    """Deterministic 63-bit seed for one named component of a run"""
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF, *name.encode("utf-8")]
    state = np.random.SeedSequence(entropy).generate_state(2, dtype=np.uint32)
    return int((int(state[0]) << 31) ^ int(state[1]))
