"""Named random substreams derived from one root seed."""

import zlib

import numpy as np


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for component `name`; stable across processes."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))
