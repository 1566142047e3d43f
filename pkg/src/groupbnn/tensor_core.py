"""Dense float tensors and bit-packed {-1, +1} tensors.

Dense tensors are plain ``float32`` numpy arrays in (n, c, h, w) layout.
:class:`BitTensor` stores one bit per element in row-major order, packed
LSB-first into little-endian 64-bit words: bit 1 means +1, bit 0 means -1.
Bits past the last logical element are always 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

WORD_BITS = 64
DTYPE = np.float32


def as_tensor4(x, *, copy: bool = False) -> np.ndarray:
    """Coerce ``x`` to a finite float32 array of rank 4."""
    arr = np.array(x, dtype=DTYPE, copy=copy) if copy else np.asarray(x, dtype=DTYPE)
    if arr.ndim != 4:
        raise ValueError(f"expected a 4-D (n, c, h, w) tensor, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("tensor contains NaN or Inf")
    return arr


def words_for(count: int) -> int:
    return (count + WORD_BITS - 1) // WORD_BITS


def pack_bool(bits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Pack a boolean array along ``axis`` into uint64 words (LSB-first).

    The packed axis becomes the last axis, padded with zero bits up to a
    whole number of words.
    """
    bits = np.moveaxis(np.asarray(bits, dtype=bool), axis, -1)
    count = bits.shape[-1]
    nwords = words_for(count)
    pad = nwords * WORD_BITS - count
    if pad:
        bits = np.concatenate([bits, np.zeros(bits.shape[:-1] + (pad,), dtype=bool)], axis=-1)
    packed = np.packbits(bits, axis=-1, bitorder="little")
    return np.ascontiguousarray(packed).view("<u8").astype(np.uint64, copy=False)


def unpack_bool(words: np.ndarray, count: int) -> np.ndarray:
    """Inverse of :func:`pack_bool` along the last axis."""
    words = np.ascontiguousarray(words, dtype="<u8")
    raw = words.view(np.uint8)
    bits = np.unpackbits(raw, axis=-1, bitorder="little", count=count)
    return bits.astype(bool)


@dataclass(frozen=True, eq=False)
class BitTensor:
    shape: tuple[int, int, int, int]
    words: np.ndarray

    def __post_init__(self):
        if len(self.shape) != 4:
            raise ValueError(f"BitTensor shape must have 4 dims, got {self.shape}")
        if self.words.dtype != np.uint64 or self.words.ndim != 1:
            raise ValueError("BitTensor words must be a 1-D uint64 array")
        if self.words.size != words_for(self.size):
            raise ValueError(
                f"{self.words.size} words cannot hold {self.size} elements exactly"
            )
        tail = self.size % WORD_BITS
        if tail and int(self.words[-1]) >> tail:
            raise ValueError("padding bits must be zero")
        self.words.setflags(write=False)

    @property
    def size(self) -> int:
        n, c, h, w = self.shape
        return n * c * h * w

    def to_bool(self) -> np.ndarray:
        """Bits as a bool array of the logical shape (True means +1)."""
        return unpack_bool(self.words, self.size).reshape(self.shape)

    @classmethod
    def from_bool(cls, bits: np.ndarray) -> "BitTensor":
        bits = np.asarray(bits, dtype=bool)
        if bits.ndim != 4:
            raise ValueError(f"expected 4-D bool array, got shape {bits.shape}")
        return cls(tuple(int(s) for s in bits.shape), pack_bool(bits.reshape(-1)))

    def __eq__(self, other):
        if not isinstance(other, BitTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self.words, other.words)

    def __repr__(self):
        return f"BitTensor(shape={self.shape}, words={self.words.size})"


def sign_values(x: np.ndarray) -> np.ndarray:
    """Elementwise sign with zero mapped to +1, as float32 {-1, +1}."""
    # adding +0.0 turns -0.0 into +0.0, so copysign sends both zeros to +1
    out = np.add(x, DTYPE(0.0), dtype=DTYPE)
    return np.copysign(DTYPE(1.0), out, out=out)


def sign_binarize(x) -> BitTensor:
    """Binarize a dense tensor: +1 where ``x >= 0``, -1 otherwise."""
    x = as_tensor4(x)
    return BitTensor.from_bool(x >= 0)


def unpack(b: BitTensor) -> np.ndarray:
    """Expand a BitTensor to a float32 tensor of +1.0 / -1.0."""
    return np.where(b.to_bool(), DTYPE(1.0), DTYPE(-1.0))
