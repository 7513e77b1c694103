import struct

import numpy as np
import pytest

from splitmf.errors import ProtocolError
from splitmf.sharing import encode
from splitmf.wire import (
    HEADER_SIZE,
    MAGIC,
    SERVER_SENDER,
    GradientMessage,
    MsgType,
    decode_frame,
    encode_frame,
    frame_size,
    iter_frames,
    read_frame,
)


def sample_message(msg_type=MsgType.PLAIN_GRADIENT, rnd=3, sender=1):
    rng = np.random.default_rng(0)
    block = encode(rng.uniform(-5, 5, size=(2, 4)), 24)
    return GradientMessage(msg_type, rnd, sender, block)


@pytest.mark.parametrize(
    "msg_type",
    [MsgType.MODEL_BROADCAST, MsgType.SHARE_EXCHANGE, MsgType.HYBRID_GRADIENT, MsgType.PLAIN_GRADIENT],
)
def test_frame_roundtrip(msg_type):
    msg = sample_message(msg_type)
    out, consumed = decode_frame(encode_frame(msg))
    assert consumed == frame_size(2, 4)
    assert out.msg_type == msg.msg_type
    assert out.round == msg.round and out.sender == msg.sender
    assert out.payload == msg.payload


def test_done_frame_has_no_payload():
    done = GradientMessage(MsgType.DONE, 7, SERVER_SENDER, None, 24)
    raw = encode_frame(done)
    assert len(raw) == HEADER_SIZE == frame_size(0, 0)
    out, _ = decode_frame(raw)
    assert out.msg_type == MsgType.DONE and out.payload is None
    assert out.round == 7 and out.sender == SERVER_SENDER


def test_header_layout_little_endian():
    msg = sample_message(rnd=0x01020304, sender=5)
    raw = encode_frame(msg)
    assert raw[:4] == MAGIC
    assert raw[4] == 1  # version
    assert raw[5] == int(MsgType.PLAIN_GRADIENT)
    assert struct.unpack_from("<I", raw, 6)[0] == 0x01020304
    assert struct.unpack_from("<I", raw, 10)[0] == 5
    assert raw[14] == 24  # frac_bits
    assert struct.unpack_from("<I", raw, 15)[0] == 2
    assert struct.unpack_from("<I", raw, 19)[0] == 4
    # First payload word is row 0, col 0, little-endian.
    first = struct.unpack_from("<Q", raw, HEADER_SIZE)[0]
    assert first == int(msg.payload.words[0, 0])


def test_bad_magic_rejected():
    raw = bytearray(encode_frame(sample_message()))
    raw[:4] = b"NOPE"
    with pytest.raises(ProtocolError, match="magic"):
        decode_frame(bytes(raw))


def test_bad_version_rejected():
    raw = bytearray(encode_frame(sample_message()))
    raw[4] = 9
    with pytest.raises(ProtocolError, match="version"):
        decode_frame(bytes(raw))


def test_unknown_message_type_rejected():
    raw = bytearray(encode_frame(sample_message()))
    raw[5] = 200
    with pytest.raises(ProtocolError, match="message type"):
        decode_frame(bytes(raw))


def test_truncated_frames_rejected():
    raw = encode_frame(sample_message())
    with pytest.raises(ProtocolError, match="header"):
        decode_frame(raw[: HEADER_SIZE - 1])
    with pytest.raises(ProtocolError, match="payload"):
        decode_frame(raw[:-8])


def test_iter_frames_concatenated_capture():
    msgs = [sample_message(rnd=r, sender=r % 2) for r in range(5)]
    buf = b"".join(encode_frame(m) for m in msgs)
    out = list(iter_frames(buf))
    assert [m.round for m in out] == list(range(5))
    assert all(a.payload == b.payload for a, b in zip(out, msgs))


def test_read_frame_from_stream():
    msg = sample_message()
    raw = encode_frame(msg)
    pos = 0

    def recv_exact(n):
        nonlocal pos
        chunk = raw[pos : pos + n]
        pos += n
        return chunk

    out = read_frame(recv_exact)
    assert out.payload == msg.payload


def test_frame_size_matches_encoding():
    msg = sample_message()
    assert len(encode_frame(msg)) == frame_size(2, 4)
