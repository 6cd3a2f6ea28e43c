"""Named, counter-based random streams (Philox) derived from one master seed.

There is no global RNG state anywhere in the package: every consumer asks
for ``stream(seed, "purpose", index, ...)`` and gets an independent generator.
"""
import zlib

import numpy as np


def _key(part) -> int:
    if isinstance(part, (int, np.integer)):
        return int(part) & 0xFFFFFFFFFFFFFFFF
    return zlib.crc32(str(part).encode("utf-8"))


def stream(seed: int, *names) -> np.random.Generator:
    ss = np.random.SeedSequence([_key(seed)] + [_key(n) for n in names])
    return np.random.Generator(np.random.Philox(ss))


def child_seed(seed: int, *names) -> int:
    ss = np.random.SeedSequence([_key(seed)] + [_key(n) for n in names])
    return int(ss.generate_state(1, np.uint64)[0])
