"""Dense array substrate: creation helpers and counter-based deterministic RNG.

Arrays are plain row-major numpy ndarrays, float32 by default and float64
when gradient checking needs the extra precision. Randomness goes through
:class:`RngStream`, a counter-based generator: the pair (seed, counter)
fully determines every value drawn, so independent streams can be derived
for any (epoch, sample) coordinate without coordinating workers.
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass

import numpy as np

from .errors import ParameterError, ShapeError

DEFAULT_DTYPE = np.float32

_MASK64 = (1 << 64) - 1


def _check_shape(shape) -> tuple[int, ...]:
    shape = tuple(int(s) for s in shape)
    if len(shape) == 0:
        raise ShapeError("shape must have at least one extent")
    for s in shape:
        if s < 1:
            raise ShapeError(f"extents must be >= 1, got {shape}")
    return shape


def create(shape, fill: float = 0.0, dtype=DEFAULT_DTYPE) -> np.ndarray:
    """Allocate a contiguous tensor of `shape` with every element == fill."""
    return np.full(_check_shape(shape), fill, dtype=dtype)


def strides_for(shape) -> tuple[int, ...]:
    """Row-major element strides for a shape (innermost stride is 1)."""
    shape = _check_shape(shape)
    strides = [1] * len(shape)
    for i in range(len(shape) - 2, -1, -1):
        strides[i] = strides[i + 1] * shape[i + 1]
    return tuple(strides)


def flat_index(coord, shape) -> int:
    """Row-major flat offset of a coordinate."""
    return sum(int(c) * s for c, s in zip(coord, strides_for(shape)))


def coord_of(flat: int, shape) -> tuple[int, ...]:
    """Inverse of :func:`flat_index`."""
    out = []
    for s in strides_for(shape):
        out.append(flat // s)
        flat %= s
    return tuple(out)


@dataclass
class RngStream:
    """Deterministic random stream addressed by (seed, counter).

    Each draw consumes exactly one counter step, so replaying from a stored
    (seed, counter) pair reproduces the remaining sequence bit-exactly.
    """

    seed: int
    counter: int = 0

    def _next_generator(self) -> np.random.Generator:
        key = (self.seed & _MASK64, self.counter & _MASK64)
        self.counter = (self.counter + 1) & _MASK64
        return np.random.Generator(np.random.Philox(key=key))

    def normal(self, shape, mean: float = 0.0, std: float = 1.0,
               dtype=DEFAULT_DTYPE) -> np.ndarray:
        """I.i.d. Gaussian tensor; advances the counter by one."""
        if std < 0:
            raise ParameterError(f"std must be >= 0, got {std}")
        g = self._next_generator()
        out = g.normal(mean, std, size=_check_shape(shape)) if std > 0 else \
            np.full(_check_shape(shape), mean, dtype=np.float64)
        return out.astype(dtype)

    def uniform(self, shape, lo: float = 0.0, hi: float = 1.0,
                dtype=DEFAULT_DTYPE) -> np.ndarray:
        """I.i.d. uniform tensor on [lo, hi); advances the counter by one."""
        if lo > hi:
            raise ParameterError(f"need lo <= hi, got lo={lo} hi={hi}")
        g = self._next_generator()
        out = lo + (hi - lo) * g.random(size=_check_shape(shape))
        return out.astype(dtype)

    def integers(self, n: int) -> int:
        """One integer in [0, n); advances the counter by one."""
        if n < 1:
            raise ParameterError(f"need n >= 1, got {n}")
        return int(self._next_generator().integers(0, n))

    def permutation(self, n: int) -> np.ndarray:
        """A permutation of range(n); advances the counter by one."""
        return self._next_generator().permutation(n)


def derive_stream(seed: int, *indices: int) -> RngStream:
    """Child stream keyed by hashing (seed, *indices).

    hash(global_seed, epoch, sample_index) gives every augmented sample its
    own stream, so results do not depend on how work is split across
    workers.
    """
    h = hashlib.blake2b(digest_size=8)
    h.update(struct.pack("<q", seed))
    for ix in indices:
        h.update(struct.pack("<q", int(ix)))
    return RngStream(seed=struct.unpack("<Q", h.digest())[0])


def all_finite(x: np.ndarray) -> bool:
    return bool(np.isfinite(x).all())
