"""Counter-based random streams.

Every random draw in the harness comes from a Philox generator whose 128-bit
key is built from ``(seed, stream name, epoch)``.  The mapping is pure, so a
stream can be recreated anywhere (another process, another machine) without
carrying generator state around.
"""

from __future__ import annotations

import zlib

import numpy as np

_MASK32 = 0xFFFFFFFF
_MASK64 = 0xFFFFFFFFFFFFFFFF


def stream_id(name: str) -> int:
    """Stable 32-bit identifier for a named stream."""
    return zlib.crc32(name.encode("utf-8")) & _MASK32


def generator(seed: int, stream: str, epoch: int = 0) -> np.random.Generator:
    """Return the generator for ``(seed, stream, epoch)``.

    ``seed`` must fit in 64 bits and ``epoch`` in 32 bits.
    """
    if not 0 <= seed <= _MASK64:
        raise ValueError(f"seed must be in [0, 2**64), got {seed}")
    if not 0 <= epoch <= _MASK32:
        raise ValueError(f"epoch must be in [0, 2**32), got {epoch}")
    key = np.array([seed, (stream_id(stream) << 32) | epoch], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key))
