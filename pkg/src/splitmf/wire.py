"""Self-described binary frames carrying fixed-point blocks between parties.

Frame layout, all integers little-endian:

    magic "SMF1" | version u8 = 1 | msg_type u8 | round u32 | sender u32
    | frac_bits u8 | rows u32 | cols u32 | rows*cols words of u64, row-major

A Done frame has rows = cols = 0 and no payload.  Capture files are just
concatenated frames with no extra framing.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .errors import ProtocolError
from .sharing import FixedPointBlock

__all__ = [
    "MAGIC",
    "VERSION",
    "SERVER_SENDER",
    "HEADER_SIZE",
    "MsgType",
    "GradientMessage",
    "frame_size",
    "encode_frame",
    "decode_frame",
    "iter_frames",
    "read_frame",
]

MAGIC = b"SMF1"
VERSION = 1
# Sources are numbered 0..T-1; the server uses the reserved sender id below.
SERVER_SENDER = 0xFFFFFFFF

_HEADER = struct.Struct("<4sBBIIBII")
HEADER_SIZE = _HEADER.size  # 23 bytes


class MsgType(IntEnum):
    MODEL_BROADCAST = 1
    SHARE_EXCHANGE = 2
    HYBRID_GRADIENT = 3
    PLAIN_GRADIENT = 4
    DONE = 5


@dataclass(frozen=True)
class GradientMessage:
    """One protocol frame: type, round, sender, and an optional block payload."""

    msg_type: MsgType
    round: int
    sender: int
    payload: FixedPointBlock | None = None
    frac_bits: int = 24

    def payload_frac_bits(self) -> int:
        return self.payload.frac_bits if self.payload is not None else self.frac_bits


def frame_size(rows: int, cols: int) -> int:
    """Bytes a frame with the given payload shape occupies on the wire."""
    return HEADER_SIZE + 8 * rows * cols


def encode_frame(msg: GradientMessage) -> bytes:
    if msg.payload is not None:
        rows, cols = msg.payload.shape
        body = np.ascontiguousarray(msg.payload.words, dtype="<u8").tobytes()
    else:
        rows, cols, body = 0, 0, b""
    header = _HEADER.pack(
        MAGIC,
        VERSION,
        int(msg.msg_type),
        msg.round,
        msg.sender,
        msg.payload_frac_bits(),
        rows,
        cols,
    )
    return header + body


def decode_frame(buf: bytes, offset: int = 0) -> tuple[GradientMessage, int]:
    """Decode one frame starting at ``offset``; returns (message, next_offset)."""
    if len(buf) - offset < HEADER_SIZE:
        raise ProtocolError("truncated frame: incomplete header")
    magic, version, msg_type, rnd, sender, frac_bits, rows, cols = _HEADER.unpack_from(
        buf, offset
    )
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported frame version {version}")
    try:
        msg_type = MsgType(msg_type)
    except ValueError:
        raise ProtocolError(f"unknown message type {msg_type}") from None
    body_len = 8 * rows * cols
    start = offset + HEADER_SIZE
    if len(buf) - start < body_len:
        raise ProtocolError("truncated frame: incomplete payload")
    if rows == 0 and cols == 0:
        payload = None
    else:
        words = np.frombuffer(buf, dtype="<u8", count=rows * cols, offset=start)
        payload = FixedPointBlock(rows, cols, words.reshape(rows, cols).copy(), frac_bits)
    msg = GradientMessage(msg_type, rnd, sender, payload, frac_bits)
    return msg, start + body_len


def iter_frames(buf: bytes):
    """Yield every frame in a concatenated capture buffer."""
    offset = 0
    while offset < len(buf):
        msg, offset = decode_frame(buf, offset)
        yield msg


def read_frame(recv_exact) -> GradientMessage:
    """Read one frame from a stream via ``recv_exact(n) -> bytes``.

    The header is validated before the payload length is trusted, so a
    garbage stream fails fast instead of provoking a huge read.
    """
    header = recv_exact(HEADER_SIZE)
    magic, version, _, _, _, _, rows, cols = _HEADER.unpack(header)
    if magic != MAGIC:
        raise ProtocolError(f"bad frame magic {magic!r}")
    if version != VERSION:
        raise ProtocolError(f"unsupported frame version {version}")
    body = recv_exact(8 * rows * cols) if rows * cols else b""
    msg, _ = decode_frame(header + body)
    return msg
