"""Named random streams derived from one seed.

Each stage draws from its own stream (``stream(seed, "ddpo")``) so changing
how many numbers one stage consumes never shifts another stage's draws.
"""

import zlib

import numpy as np

STREAMS = ("data", "diffusion", "ddpo", "translator", "eval")


def stream(seed: int, name: str, *sub: int) -> np.random.Generator:
    key = [int(seed), zlib.crc32(name.encode("utf-8")), *map(int, sub)]
    return np.random.default_rng(np.random.SeedSequence(key))
