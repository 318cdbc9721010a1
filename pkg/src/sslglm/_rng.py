"""Named random substreams derived from a single root seed."""

from __future__ import annotations

import zlib
from typing import Union

import numpy as np

SeedLike = Union[int, np.random.Generator, None]


def _key(name) -> int:
    if isinstance(name, (int, np.integer)):
        if name < 0:
            raise ValueError("substream keys must be non-negative")
        return int(name)
    return zlib.crc32(str(name).encode("utf-8"))


def substream(seed: int, *names) -> np.random.Generator:
    """Return an independent generator for ``(seed, *names)``.

    The same arguments always give the same stream, and streams for
    different names do not overlap, so components (pool, replicate ``i``,
    beta prior, ...) can be re-run on their own.
    """
    entropy = [_key(seed)] + [_key(n) for n in names]
    return np.random.default_rng(np.random.SeedSequence(entropy))


def as_generator(seed: SeedLike) -> np.random.Generator:
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
