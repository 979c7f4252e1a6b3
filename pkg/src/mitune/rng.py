"""Seeded PCG64 streams. All randomness in the package flows through here."""
from __future__ import annotations

import numpy as np


def generator(seed: int, *stream: int | str) -> np.random.Generator:
    """PCG64 generator for ``seed`` and an optional stream path.

    Stream components are mixed with numpy's ``SeedSequence`` so that
    ``generator(s, "lm")`` and ``generator(s, "data", 3)`` are independent.
    """
    words = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in stream:
        if isinstance(part, str):
            words.extend(part.encode("utf-8"))
        else:
            words.append(int(part) & 0xFFFFFFFFFFFFFFFF)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(words)))


def mix(seed: int, index: int) -> int:
    """Per-item derived seed (splitmix64 finaliser of ``seed`` and ``index``)."""
    z = (int(seed) * 0x9E3779B97F4A7C15 + int(index) + 1) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & 0xFFFFFFFFFFFFFFFF
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & 0xFFFFFFFFFFFFFFFF
    return z ^ (z >> 31)
