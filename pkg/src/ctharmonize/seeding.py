"""Named random substreams derived from a master seed."""
import zlib

import numpy as np


def substream(master_seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``name``; stable across runs and platforms."""
    key = [int(master_seed), zlib.crc32(name.encode("utf-8")), *map(int, extra)]
    return np.random.default_rng(key)
