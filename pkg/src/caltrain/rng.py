"""Counter-based keyed randomness.

All stochastic choices in the system (weight init, shuffling, augmentation,
dropout) are drawn from Philox streams keyed by (seed, purpose, coordinates).
The same coordinates yield the same stream no matter which process or
partition performs the draw, which is what makes partitioned training
bit-identical to monolithic training.
"""

from __future__ import annotations

import hashlib
import os
import struct

import numpy as np

_DOMAIN = b"caltrain.rng.v1"


def _encode_coord(c) -> bytes:
    if isinstance(c, bool):
        raise TypeError("bool coordinates are ambiguous; use int")
    if isinstance(c, int):
        if not -(2**63) <= c < 2**63:
            raise ValueError("coordinate out of 64-bit range")
        return b"i" + struct.pack("<q", c)
    if isinstance(c, str):
        raw = c.encode("utf-8")
        return b"s" + struct.pack("<H", len(raw)) + raw
    if isinstance(c, bytes):
        return b"b" + struct.pack("<H", len(c)) + c
    raise TypeError(f"unsupported coordinate type: {type(c).__name__}")


class DeterministicRng:
    """Keyed generator factory: ``generator(purpose, *coords)`` is a pure function."""

    def __init__(self, seed: int):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF

    @classmethod
    def from_entropy(cls) -> "DeterministicRng":
        """Non-deterministic mode: key drawn from OS entropy (off in tests)."""
        return cls(int.from_bytes(os.urandom(8), "little"))

    def generator(self, purpose: str, *coords) -> np.random.Generator:
        h = hashlib.sha256()
        h.update(_DOMAIN)
        h.update(struct.pack("<Q", self.seed))
        h.update(_encode_coord(purpose))
        for c in coords:
            h.update(_encode_coord(c))
        key = np.frombuffer(h.digest()[:16], dtype="<u8")
        return np.random.Generator(np.random.Philox(key=key))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        return f"DeterministicRng(seed={self.seed})"
