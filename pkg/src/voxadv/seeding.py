"""Named random substreams derived from one root seed."""

from __future__ import annotations

import zlib

import numpy as np


def substream(root_seed: int, *names: str | int) -> np.random.Generator:
    """Return a counter-based (Philox) generator keyed by ``root_seed`` and ``names``.

    Streams for different name tuples are independent, and each one is
    reproducible on its own, so components can be re-run in isolation.
    """
    key = [int(root_seed) & 0xFFFFFFFFFFFFFFFF]
    for name in names:
        if isinstance(name, str):
            key.append(zlib.crc32(name.encode("utf-8")))
        else:
            key.append(int(name) & 0xFFFFFFFF)
    ss = np.random.SeedSequence(entropy=key[0], spawn_key=tuple(key[1:]))
    return np.random.Generator(np.random.Philox(ss))
