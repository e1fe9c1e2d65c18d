"""
随机数工具 - 从 (seed, 键...) 派生独立的随机数子流

Every random draw in the workbench goes through :func:`derive_rng`, so the output of
an operation depends only on its seed and its own keys, never on call order.
"""

from typing import Union

import numpy as np

# 各用途的固定键，避免不同阶段共享子流
STREAM_SAMPLE = 0x5A
STREAM_INIT = 0x1B
STREAM_SHUFFLE = 0x5F
STREAM_SUBSET = 0x55
STREAM_GRADCHECK = 0x6C

SPLIT_CODES = {"train": 0, "valid": 1, "test": 2}

_U64 = (1 << 64) - 1


def derive_rng(seed: int, *keys: Union[int, str]) -> np.random.Generator:
    """Return a Generator seeded from ``seed`` and an ordered tuple of keys."""
    entropy = [int(seed) & _U64]
    for key in keys:
        if isinstance(key, str):
            key = SPLIT_CODES[key]
        entropy.append(int(key) & _U64)
    return np.random.default_rng(np.random.SeedSequence(entropy))
