"""Counter-based random streams.

Every random quantity in the package comes from a Philox-4x64 stream keyed by
an explicit (seed, subkey) pair.  Philox is counter based, so any position in
a stream can be reached in O(1) with ``advance`` and the output depends only on
(key, position), never on platform or draw history.  Subkeys keep streams for
different purposes disjoint: run ``r`` of a solver uses subkey ``r``; noise
generation uses a fixed high subkey that no run index reaches.
"""

from __future__ import annotations

import numpy as np

_WORDS_PER_BLOCK = 4  # Philox-4x64 emits 4 raw 64-bit words per counter step
NOISE_SUBKEY = 2**63 + 11  # run subkeys are small ints; this never collides


def raw_block(seed: int, subkey: int, start: int, count: int) -> np.ndarray:
    """Raw 64-bit words at positions start..start+count-1 of stream (seed, subkey)."""
    if start < 0 or count < 0:
        raise ValueError("stream positions are nonnegative")
    bg = np.random.Philox(key=np.array([seed, subkey], dtype=np.uint64))
    bg.advance(start // _WORDS_PER_BLOCK)
    pad = start % _WORDS_PER_BLOCK
    return bg.random_raw(pad + count)[pad:]


class IndexStream:
    """Uniform row indices in [0, n); element k is addressable in O(1).

    The k-th index is a pure function of (seed, subkey, k): the k-th raw word
    reduced modulo n.  The modulo bias is at most n / 2**64, far below any
    tolerance used here.
    """

    def __init__(self, seed: int, n: int, subkey: int = 0):
        if n <= 0:
            raise ValueError("need at least one row to sample")
        self.seed = int(seed)
        self.subkey = int(subkey)
        self.n = int(n)

    def block(self, start: int, count: int) -> np.ndarray:
        raw = raw_block(self.seed, self.subkey, start, count)
        return (raw % np.uint64(self.n)).astype(np.int64)

    def element(self, k: int) -> int:
        return int(self.block(k, 1)[0])


def index_stream(seed: int, n: int, subkey: int = 0) -> IndexStream:
    return IndexStream(seed, n, subkey)


def standard_gaussians(seed: int, count: int, subkey: int = NOISE_SUBKEY) -> np.ndarray:
    """`count` N(0,1) draws via Box-Muller on the raw uniform stream.

    Box-Muller on explicit uniforms (rather than a library normal generator)
    keeps the mapping raw-words -> sample fixed, so noise vectors reproduce
    bit-for-bit from the seed alone.
    """
    if count < 0:
        raise ValueError("count must be nonnegative")
    pairs = (count + 1) // 2
    raw = raw_block(seed, subkey, 0, 2 * pairs)
    # top 53 bits, offset by half an ulp: uniforms lie strictly inside (0, 1)
    u = ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53
    u1, u2 = u[:pairs], u[pairs:]
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.concatenate([r * np.cos(theta), r * np.sin(theta)])
    return z[:count]
