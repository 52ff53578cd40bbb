"""Named random substreams derived from a root seed."""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *extra)``; stable across runs."""
    return np.random.default_rng([int(seed), stream_key(name), *map(int, extra)])
