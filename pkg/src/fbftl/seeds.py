"""Named random substreams derived from one root seed.

Every consumer asks for a stream by name (``"init"``, ``"selection"``,
``"channel"``, ``"noise"``, ``"shuffle"``, ...) plus optional integer keys, so
changing how one stream is consumed never perturbs another.
"""

from __future__ import annotations

import zlib

import numpy as np


def stream_key(name: str) -> int:
    return zlib.crc32(name.encode("utf-8"))


def stream(seed: int, name: str, *keys: int) -> np.random.Generator:
    """Independent generator for ``(seed, name, *keys)``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_key(name), *(int(k) for k in keys)))
    return np.random.default_rng(ss)


def derive_seed(seed: int, name: str, *keys: int) -> int:
    """Integer child seed, for handing to code that takes a plain ``seed``."""
    ss = np.random.SeedSequence(int(seed), spawn_key=(stream_key(name), *(int(k) for k in keys)))
    return int(ss.generate_state(1, dtype=np.uint32)[0])
