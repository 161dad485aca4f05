"""Named random substreams derived from a single root seed."""

from __future__ import annotations

import zlib

import numpy as np

STREAMS = ("mask", "init", "noise", "attack", "shuffle", "eval")


def substream(seed: int, name: str, *extra: int) -> np.random.Generator:
    """Independent generator for stream ``name`` (plus optional integer keys)."""
    key = [int(seed) & 0xFFFFFFFF, zlib.crc32(name.encode()), *(int(e) for e in extra)]
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(key)))
