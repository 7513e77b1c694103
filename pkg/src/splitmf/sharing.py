"""Additive secret sharing of real-valued grids over the mod 2^64 ring.

Reals are encoded as 64-bit ring elements at scale 2^frac_bits via the
two's-complement embedding, so ring addition reconstructs sums *exactly*:
splitting introduces no error beyond the initial quantization.  A word is
decodable while its signed magnitude stays below 2^62; one headroom bit is
reserved so a full aggregation round (sum of T blocks, each within budget)
cannot silently wrap into the wrong sign.

Share randomness comes from a ChaCha20 keystream, so shares drawn with a
seed are reproducible in tests while remaining uniform over the full ring.
"""

from __future__ import annotations

import hashlib
import secrets
from dataclasses import dataclass

import numpy as np
from cryptography.hazmat.primitives.ciphers import Cipher, algorithms

from .errors import ConfigError, EncodingOverflowError, ShapeError

__all__ = [
    "FRAC_BITS_MIN",
    "FRAC_BITS_MAX",
    "HEADROOM_BITS",
    "FixedPointBlock",
    "ShareSet",
    "ShareRng",
    "ZeroRng",
    "derive_source_seed",
    "encode",
    "decode",
    "split_shares",
    "combine_shares",
]

FRAC_BITS_MIN = 8
FRAC_BITS_MAX = 40
# Signed word magnitudes must stay below 2^HEADROOM_BITS to be decodable.
HEADROOM_BITS = 62


def _check_frac_bits(f: int):
    if not FRAC_BITS_MIN <= f <= FRAC_BITS_MAX:
        raise ConfigError(f"frac_bits must be in [{FRAC_BITS_MIN}, {FRAC_BITS_MAX}], got {f}")


@dataclass(frozen=True)
class FixedPointBlock:
    """A rows x cols grid of 64-bit ring elements at scale 2^frac_bits."""

    rows: int
    cols: int
    words: np.ndarray
    frac_bits: int

    def __post_init__(self):
        _check_frac_bits(self.frac_bits)
        words = np.ascontiguousarray(self.words, dtype=np.uint64)
        if words.shape != (self.rows, self.cols):
            raise ShapeError(f"words shape {words.shape} != ({self.rows}, {self.cols})")
        object.__setattr__(self, "words", words)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.rows, self.cols)

    def same_layout(self, other: "FixedPointBlock") -> bool:
        return self.shape == other.shape and self.frac_bits == other.frac_bits

    def __eq__(self, other) -> bool:
        if not isinstance(other, FixedPointBlock):
            return NotImplemented
        return self.same_layout(other) and bool(np.array_equal(self.words, other.words))


@dataclass(frozen=True)
class ShareSet:
    """An ordered tuple of T same-layout blocks whose ring-sum is the secret."""

    blocks: tuple[FixedPointBlock, ...]

    def __post_init__(self):
        if len(self.blocks) < 2:
            raise ConfigError("a ShareSet needs at least 2 shares")
        first = self.blocks[0]
        for b in self.blocks[1:]:
            if not first.same_layout(b):
                raise ShapeError("all shares must have the same shape and frac_bits")

    def __len__(self) -> int:
        return len(self.blocks)

    def __iter__(self):
        return iter(self.blocks)

    def __getitem__(self, idx):
        return self.blocks[idx]


class ShareRng:
    """Uniform ring-element source backed by a ChaCha20 keystream.

    Pass ``seed`` (int or bytes) for a reproducible stream; omit it for a
    fresh key from the OS.  One instance belongs to one party; it is not
    thread-safe.
    """

    def __init__(self, seed: int | bytes | None = None):
        if seed is None:
            key = secrets.token_bytes(32)
        else:
            raw = seed if isinstance(seed, bytes) else str(int(seed)).encode()
            key = hashlib.sha256(b"splitmf-share-rng:" + raw).digest()
        self._enc = Cipher(algorithms.ChaCha20(key, bytes(16)), mode=None).encryptor()
        self._zeros: bytes = b""

    def words(self, shape: tuple[int, int]) -> np.ndarray:
        n = int(np.prod(shape))
        nbytes = 8 * n
        if len(self._zeros) < nbytes:
            self._zeros = bytes(nbytes)
        out = bytearray(nbytes + 16)  # update_into needs block_size - 1 slack
        self._enc.update_into(self._zeros[:nbytes], out)
        return np.frombuffer(out, dtype="<u8", count=n).reshape(shape)


class ZeroRng:
    """Degenerate randomness source: every share word is zero.

    Only useful for tests that need the remainder share to equal the
    plaintext encoding.
    """

    def words(self, shape: tuple[int, int]) -> np.ndarray:
        return np.zeros(shape, dtype=np.uint64)


def derive_source_seed(share_seed: int, source_id: int) -> bytes:
    """Per-party key material so every source gets an independent stream."""
    return hashlib.sha256(f"splitmf-source:{int(share_seed)}:{int(source_id)}".encode()).digest()


def encode(x: np.ndarray, frac_bits: int) -> FixedPointBlock:
    """Quantize a real grid to ring words: round(x * 2^f) embedded two's-complement.

    Raises :class:`EncodingOverflowError` naming the first offending cell if
    any |x| * 2^f reaches the 2^62 headroom bound.
    """
    _check_frac_bits(frac_bits)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2:
        raise ShapeError("encode expects a 2-d grid")
    scaled = np.rint(x * float(2**frac_bits))
    bad = np.abs(scaled) >= float(2**HEADROOM_BITS)
    if bad.any():
        i, j = np.argwhere(bad)[0]
        raise EncodingOverflowError(
            f"value {x[i, j]!r} at cell ({i}, {j}) exceeds fixed-point headroom "
            f"(|x| * 2^{frac_bits} must stay below 2^{HEADROOM_BITS})"
        )
    words = scaled.astype(np.int64).view(np.uint64)
    return FixedPointBlock(x.shape[0], x.shape[1], words, frac_bits)


def decode(block: FixedPointBlock, check_headroom: bool = True) -> np.ndarray:
    """Inverse of :func:`encode`: signed words divided by 2^f.

    With ``check_headroom=True`` a word outside the decodable band raises
    :class:`EncodingOverflowError`.  ``check_headroom=False`` decodes the
    wrapped value anyway (used when deliberately inspecting share traffic,
    which is uniform over the whole ring).
    """
    signed = block.words.view(np.int64)
    if check_headroom:
        bad = np.abs(signed) >= 2**HEADROOM_BITS
        if bad.any():
            i, j = np.argwhere(bad)[0]
            raise EncodingOverflowError(
                f"word at cell ({i}, {j}) is outside the decodable headroom band"
            )
    return signed.astype(np.float64) / float(2**block.frac_bits)


def split_shares(plain: FixedPointBlock, n_shares: int, rng) -> ShareSet:
    """Split a block into n_shares additive shares.

    The first n_shares - 1 blocks are uniform ring elements drawn from
    ``rng`` (a :class:`ShareRng`, or anything with a ``words(shape)``
    method); the last is the remainder ``plain - sum(others)`` in the ring.
    ``rng`` may also be an integer seed as a convenience.
    """
    if n_shares < 2:
        raise ConfigError("secret sharing needs at least 2 shares (1 offers no hiding)")
    if isinstance(rng, int):
        rng = ShareRng(rng)
    total = np.zeros(plain.shape, dtype=np.uint64)
    blocks = []
    for _ in range(n_shares - 1):
        w = rng.words(plain.shape)
        np.add(total, w, out=total)
        blocks.append(FixedPointBlock(plain.rows, plain.cols, w, plain.frac_bits))
    remainder = plain.words - total
    blocks.append(FixedPointBlock(plain.rows, plain.cols, remainder, plain.frac_bits))
    return ShareSet(tuple(blocks))


def combine_shares(shares) -> FixedPointBlock:
    """Elementwise ring-sum of blocks (a ShareSet or iterable of blocks)."""
    blocks = list(shares)
    if not blocks:
        raise ShapeError("cannot combine zero blocks")
    first = blocks[0]
    total = first.words.copy()
    for b in blocks[1:]:
        if not first.same_layout(b):
            raise ShapeError("cannot combine blocks with different shape or frac_bits")
        np.add(total, b.words, out=total)
    return FixedPointBlock(first.rows, first.cols, total, first.frac_bits)
