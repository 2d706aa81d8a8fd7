import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode())


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for a named purpose (data, init, flip, shuffle...)."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream_key(name), *extra]))


def subseed(seed: int, name: str, *extra: int) -> int:
    """Integer seed for consumers that need one (torch generators)."""
    ss = np.random.SeedSequence([seed, stream_key(name), *extra])
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> 1)
