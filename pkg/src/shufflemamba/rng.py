"""Counter-based random streams.

A stream is addressed by ``(seed, stream_id)`` and walks a 256-bit block
counter, so any stream can be replayed from any point without touching the
others. The block cipher is numpy's Philox-4x64.
"""

import hashlib
from dataclasses import dataclass

import numpy as np

_MASK64 = (1 << 64) - 1


def stream_id_for(*names):
    """Stable 64-bit id for a tuple of names (e.g. ``("shuffle", step, b)``)."""
    text = "/".join(str(n) for n in names).encode()
    return int.from_bytes(hashlib.blake2b(text, digest_size=8).digest(), "little")


@dataclass
class RngStream:
    seed: int
    stream_id: int = 0
    counter: int = 0

    def __post_init__(self):
        self.seed = int(self.seed) & _MASK64
        self.stream_id = int(self.stream_id) & _MASK64
        self.counter = int(self.counter)

    def _generator(self):
        key = self.seed | (self.stream_id << 64)
        return np.random.Generator(np.random.Philox(key=key, counter=self.counter))

    def uniform(self, n):
        """``n`` doubles in [0, 1); advances the counter by the blocks consumed."""
        n = int(n)
        if n <= 0:
            return np.empty(0)
        out = self._generator().random(n)
        self.counter += -(-n // 4)
        return out

    def normal(self, shape):
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape))
        out = self._generator().standard_normal(n)
        # standard_normal may consume a variable number of blocks; one
        # block per output is a safe upper bound that keeps draws disjoint
        self.counter += max(n, 1)
        return out.reshape(shape)

    def child(self, *names):
        """Independent stream keyed by this stream's id plus ``names``."""
        return RngStream(self.seed, stream_id_for(self.stream_id, *names))


def rng_uniform(stream, n):
    return stream.uniform(n)
