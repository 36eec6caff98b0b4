"""Named random substreams derived from one run seed."""

import zlib

import numpy as np

STREAMS = ("etl", "folds", "embed", "init", "shuffle", "dropout")


def substream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, name, keys); stable across runs and platforms."""
    tag = zlib.crc32(name.encode("utf-8"))
    return np.random.default_rng(np.random.SeedSequence([int(seed), tag, *map(int, keys)]))


def subseed(seed: int, name: str, *keys: int) -> int:
    return int(substream(seed, name, *keys).integers(0, 2**31 - 1))
