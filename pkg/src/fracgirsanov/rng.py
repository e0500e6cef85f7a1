"""Counter-based random streams.

Every stream is a Philox generator whose 128-bit key packs the master seed,
a tag naming the experiment stage, and the path index.  Draws for path ``p``
therefore never depend on how paths are batched or spread over workers.
"""

from dataclasses import dataclass
import zlib

import numpy as np

_MASK64 = (1 << 64) - 1


def tag_code(tag):
    """Stable 32-bit code for a stream tag (str or int)."""
    if isinstance(tag, (int, np.integer)):
        return int(tag) & 0xFFFFFFFF
    return zlib.crc32(str(tag).encode("utf-8"))


@dataclass(frozen=True)
class Stream:
    """One reproducible random stream: (seed, tag, index)."""

    seed: int
    tag: str = "paths"
    index: int = 0

    @property
    def stream_id(self):
        return f"{self.seed}:{self.tag}:{self.index}"

    def key(self):
        hi = (tag_code(self.tag) << 32) | (int(self.index) & 0xFFFFFFFF)
        return np.array([int(self.seed) & _MASK64, hi & _MASK64], dtype=np.uint64)

    def generator(self):
        return np.random.Generator(np.random.Philox(key=self.key()))

    def substream(self, index):
        return Stream(self.seed, self.tag, index)


def normal_block(seed, tag, indices, size):
    """Standard normal draws of shape (len(indices), size), one stream per row."""
    indices = np.asarray(indices, dtype=np.int64)
    out = np.empty((indices.size, size))
    for row, idx in enumerate(indices):
        out[row] = Stream(seed, tag, int(idx)).generator().standard_normal(size)
    return out
