"""Seeded random streams.

Every stochastic component draws from a named stream so that worlds and runs
are reproducible bit-for-bit across platforms. Streams are numpy's Philox4x64-10
counter-based generator keyed through ``SeedSequence(entropy=[seed, tag, *extra])``.
Per-candidate keyed draws (random priorities) use the SplitMix64 finalizer.
"""

from __future__ import annotations

import numpy as np

PRNG_VERSION = "philox4x64-10/seedseq/splitmix64-v1"

# stream tags
WORLD_MAP = 1
WORLD_FINGERPRINT = 2
WORLD_LAYOUT = 3
WORLD_CALIBRATION = 4
WORLD_DATASETS = 5
RUN_GENERATE = 11
RUN_LATENCY = 12
RUN_FINETUNE = 13
RUN_SURROGATE = 14
RUN_RANDOM_PRIORITY = 15
REORDER = 21
ORACLE_NOISE = 31

_MASK64 = (1 << 64) - 1


def stream(seed: int, tag: int, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, tag, *extra)``; all parts must be >= 0."""
    ss = np.random.SeedSequence([int(seed) & _MASK64, int(tag), *(int(e) & _MASK64 for e in extra)])
    return np.random.Generator(np.random.Philox(ss))


def splitmix64(x):
    """SplitMix64 finalizer over uint64 arrays (wrapping arithmetic)."""
    z = np.asarray(x, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = z + np.uint64(0x9E3779B97F4A7C15)
        z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
        z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
        z = z ^ (z >> np.uint64(31))
    return z


def keyed_uniform(seed: int, salt: int, ids) -> np.ndarray:
    """Uniform [0, 1) draw per id, a pure function of ``(seed, salt, id)``."""
    ids = np.asarray(ids, dtype=np.uint64)
    with np.errstate(over="ignore"):
        h = splitmix64(np.uint64(seed & _MASK64))
        h = splitmix64(h ^ np.uint64(salt & _MASK64))
        h = splitmix64(h ^ ids)
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / 9007199254740992.0)
