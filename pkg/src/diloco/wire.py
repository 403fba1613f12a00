"""Framed binary messages exchanged between coordinator and workers.

Frame layout (all integers little-endian)::

    magic       4s   b"DLC1"
    msg_type    u8   JOIN=1 PARAMS=2 OUTER_GRAD=3 ACK=4 SHUTDOWN=5
                     (bit 0x80 set: payload values are f32 instead of f64)
    worker_id   u32
    outer_step  u32
    payload_len u64
    payload     payload_len bytes
    crc32       u32  over header + payload

PARAMS / OUTER_GRAD payloads are packed float vectors. A PARAMS frame with
an empty payload tells the worker to keep training from its own parameters.
JOIN and ACK carry the sender's 8-byte config hash; SHUTDOWN optionally
carries a UTF-8 reason.
"""

from __future__ import annotations

import enum
import socket
import struct
import zlib
from dataclasses import dataclass

import numpy as np

MAGIC = b"DLC1"
HEADER = struct.Struct("<4sBIIQ")
CRC = struct.Struct("<I")
OVERHEAD = HEADER.size + CRC.size  # 25 bytes of framing per message
F32_FLAG = 0x80
MAX_PAYLOAD = 1 << 34


class ProtocolError(Exception):
    pass


class MsgType(enum.IntEnum):
    JOIN = 1
    PARAMS = 2
    OUTER_GRAD = 3
    ACK = 4
    SHUTDOWN = 5


VECTOR_TYPES = (MsgType.PARAMS, MsgType.OUTER_GRAD)


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    worker_id: int
    outer_step: int
    payload: bytes = b""
    f32: bool = False

    @classmethod
    def vector(cls, msg_type: MsgType, worker_id: int, outer_step: int,
               values: np.ndarray | None, f32: bool = False) -> "Message":
        if values is None:
            return cls(msg_type, worker_id, outer_step, b"", f32)
        dtype = "<f4" if f32 else "<f8"
        return cls(msg_type, worker_id, outer_step,
                   np.ascontiguousarray(values, dtype=dtype).tobytes(), f32)

    def values(self) -> np.ndarray | None:
        """Payload as a float64 vector, or None for an empty payload."""
        if not self.payload:
            return None
        dtype = "<f4" if self.f32 else "<f8"
        return np.frombuffer(self.payload, dtype=dtype).astype(np.float64)

    @property
    def value_count(self) -> int:
        return len(self.payload) // (4 if self.f32 else 8)

    @property
    def frame_size(self) -> int:
        return OVERHEAD + len(self.payload)


def config_hash_bytes(h: int) -> bytes:
    return struct.pack("<Q", h)


def encode_message(msg: Message) -> bytes:
    mtype = MsgType(msg.msg_type)
    if not (0 <= msg.worker_id < 2**32 and 0 <= msg.outer_step < 2**32):
        raise ProtocolError("worker_id/outer_step out of u32 range")
    if mtype in VECTOR_TYPES and len(msg.payload) % (4 if msg.f32 else 8):
        raise ProtocolError("vector payload is not a whole number of floats")
    code = int(mtype) | (F32_FLAG if msg.f32 else 0)
    head = HEADER.pack(MAGIC, code, msg.worker_id, msg.outer_step, len(msg.payload))
    crc = zlib.crc32(msg.payload, zlib.crc32(head))
    return b"".join((head, msg.payload, CRC.pack(crc)))


def _parse_header(head: bytes):
    magic, code, wid, step, plen = HEADER.unpack(head)
    if magic != MAGIC:
        raise ProtocolError(f"bad magic {magic!r}")
    f32 = bool(code & F32_FLAG)
    try:
        mtype = MsgType(code & ~F32_FLAG)
    except ValueError:
        raise ProtocolError(f"unknown message type {code & ~F32_FLAG}") from None
    if plen > MAX_PAYLOAD:
        raise ProtocolError(f"length {plen} exceeds limit")
    if mtype in VECTOR_TYPES and plen % (4 if f32 else 8):
        raise ProtocolError(f"length {plen} is not a whole number of floats")
    return mtype, wid, step, plen, f32


def _finish(head: bytes, body: bytes, mtype, wid, step, f32) -> Message:
    payload, (crc,) = body[:-CRC.size], CRC.unpack(body[-CRC.size:])
    if zlib.crc32(payload, zlib.crc32(head)) != crc:
        raise ProtocolError("crc mismatch")
    return Message(mtype, wid, step, bytes(payload), f32)


def decode_message(frame: bytes) -> Message:
    """Decode exactly one frame; trailing or missing bytes are errors."""
    if len(frame) < OVERHEAD:
        raise ProtocolError(f"length: truncated frame ({len(frame)} bytes)")
    head = frame[:HEADER.size]
    mtype, wid, step, plen, f32 = _parse_header(head)
    if len(frame) != OVERHEAD + plen:
        raise ProtocolError(
            f"length: frame is {len(frame)} bytes, header says {OVERHEAD + plen}")
    return _finish(head, frame[HEADER.size:], mtype, wid, step, f32)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray(n)
    view = memoryview(buf)
    got = 0
    while got < n:
        k = sock.recv_into(view[got:], n - got)
        if k == 0:
            raise ConnectionError("connection closed mid-frame" if got else "connection closed")
        got += k
    return bytes(buf)


def read_message(sock: socket.socket) -> Message:
    head = _recv_exact(sock, HEADER.size)
    mtype, wid, step, plen, f32 = _parse_header(head)
    body = _recv_exact(sock, plen + CRC.size)
    return _finish(head, body, mtype, wid, step, f32)


def send_message(sock: socket.socket, msg: Message) -> int:
    frame = encode_message(msg)
    sock.sendall(frame)
    return len(frame)
