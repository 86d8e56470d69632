"""Counter-based deterministic random streams.

All randomness in this package flows through ``RandomStream``, a
Philox-4x32-10 generator (Salmon et al., "Parallel random numbers: as easy
as 1, 2, 3").  The generator is pure 32/64-bit integer arithmetic, so the
raw bit stream is identical on every platform; normals are produced with
the Box-Muller transform, which only uses IEEE-754 double operations and
libm functions on well-conditioned arguments.  Together these make every
experiment output reproducible byte-for-byte from (seed, stream) alone.

The 128-bit Philox counter is split as:

    words 0..1  block index (advances as numbers are drawn)
    words 2..3  stream id   (fixed per ``RandomStream``)

so substreams with different ids never overlap regardless of how much is
drawn from each.  Use ``spawn`` to derive a named substream from the same
seed.
"""

import numpy as np

_MASK32 = np.uint64(0xFFFFFFFF)
_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_SHIFT32 = np.uint64(32)


def philox4x32(counter, key, rounds=10):
    """Apply the Philox-4x32 block function to an array of counters.

    counter: uint64 array of shape (n, 4), each word < 2**32
    key:     pair of uint64 words < 2**32
    Returns uint64 array (n, 4) of output words, each < 2**32.
    """
    c0, c1, c2, c3 = (counter[:, i].copy() for i in range(4))
    k0 = np.uint64(key[0])
    k1 = np.uint64(key[1])
    for _ in range(rounds):
        p0 = _M0 * c0  # exact: both factors < 2**32
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0 = hi1 ^ c1 ^ k0
        c1 = lo1
        c2 = hi0 ^ c3 ^ k1
        c3 = lo0
        k0 = (k0 + _W0) & _MASK32
        k1 = (k1 + _W1) & _MASK32
    return np.stack([c0, c1, c2, c3], axis=1)


class RandomStream:
    """Seeded, named substream of Philox-4x32-10 output."""

    def __init__(self, seed: int, stream: int = 0):
        seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        stream = int(stream) & 0xFFFFFFFFFFFFFFFF
        self.seed = seed
        self.stream = stream
        self._key = (np.uint64(seed & 0xFFFFFFFF), np.uint64(seed >> 32))
        self._stream_words = (
            np.uint64(stream & 0xFFFFFFFF),
            np.uint64(stream >> 32),
        )
        self._block = 0

    def spawn(self, stream: int) -> "RandomStream":
        """Fresh substream of the same seed; independent of this one."""
        return RandomStream(self.seed, stream)

    def _raw_blocks(self, n_blocks: int) -> np.ndarray:
        base = self._block
        self._block += n_blocks
        idx = np.arange(base, base + n_blocks, dtype=np.uint64)
        counter = np.empty((n_blocks, 4), dtype=np.uint64)
        counter[:, 0] = idx & _MASK32
        counter[:, 1] = idx >> _SHIFT32
        counter[:, 2] = self._stream_words[0]
        counter[:, 3] = self._stream_words[1]
        return philox4x32(counter, self._key)

    def uint32(self, n: int) -> np.ndarray:
        """Next n raw 32-bit words of the stream."""
        n = int(n)
        if n < 0:
            raise ValueError("n must be non-negative")
        if n == 0:
            return np.empty(0, dtype=np.uint32)
        n_blocks = -(-n // 4)
        words = self._raw_blocks(n_blocks).reshape(-1)[:n]
        return words.astype(np.uint32)

    def uniform(self, size=None, low: float = 0.0, high: float = 1.0):
        """Uniform doubles in [low, high) with 53 random bits each."""
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape)) if shape else 1
        raw = self.uint32(2 * n).astype(np.uint64)
        bits = (raw[0::2] << _SHIFT32) | raw[1::2]
        u = (bits >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)
        out = low + (high - low) * u
        if size is None:
            return float(out[0])
        return out.reshape(shape)

    def normal(self, size=None):
        """Standard normals via the Box-Muller transform."""
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape)) if shape else 1
        n_pairs = -(-n // 2)
        u = self.uniform(2 * n_pairs)
        u1 = 1.0 - u[0::2]  # (0, 1]: log is finite
        u2 = u[1::2]
        r = np.sqrt(-2.0 * np.log(u1))
        z = np.empty(2 * n_pairs)
        z[0::2] = r * np.cos(2.0 * np.pi * u2)
        z[1::2] = r * np.sin(2.0 * np.pi * u2)
        out = z[:n]
        if size is None:
            return float(out[0])
        return out.reshape(shape)

    def integers(self, low: int, high: int, size=None):
        """Uniform integers in [low, high) by rejection-free 64-bit modulo.

        Modulo bias is < 2**-40 for any desk-scale range; acceptable here.
        """
        shape = () if size is None else tuple(np.atleast_1d(size))
        n = int(np.prod(shape)) if shape else 1
        raw = self.uint32(2 * n).astype(np.uint64)
        bits = (raw[0::2] << _SHIFT32) | raw[1::2]
        span = np.uint64(high - low)
        out = (bits % span).astype(np.int64) + low
        if size is None:
            return int(out[0])
        return out.reshape(shape)
