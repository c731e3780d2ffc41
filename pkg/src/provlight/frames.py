"""Datagram frame codec for the pub/sub transport.

Common header: length, msg_type u8. Length is the total frame size in
bytes and is encoded as a single u8 when the frame fits in 255 bytes, or as
the escape byte 0x01 followed by a u16 for larger frames (fragments can
legitimately exceed 255 bytes; the hard cap is ``MAX_FRAME``).

All integers are big-endian. Type codes:

    CONNECT 0x04   flags u8 (bit2 clean session), protocol_id u8 = 0x01,
                   duration u16 (keepalive seconds), client_id bytes
    CONNACK 0x05   return_code u8
    REGISTER 0x0A  topic_id u16, msg_id u16, topic_name bytes
    REGACK 0x0B    topic_id u16, msg_id u16, return_code u8
    PUBLISH 0x0C   flags u8 (bits 5-6 qos, bit 7 dup), topic_id u16,
                   msg_id u16, payload bytes
    PUBCOMP 0x0E / PUBREC 0x0F / PUBREL 0x10   msg_id u16
    SUBSCRIBE 0x12 flags u8, msg_id u16, topic_name bytes ('+' wildcard)
    SUBACK 0x13    flags u8, topic_id u16, msg_id u16, return_code u8
    PINGREQ 0x16 / PINGRESP 0x17 / DISCONNECT 0x18   empty
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

MAX_FRAME = 1400
LONG_LENGTH_ESCAPE = 0x01

RC_ACCEPTED = 0x00
RC_REJECTED = 0x01

FLAG_CLEAN_SESSION = 0x04  # CONNECT bit 2
FLAG_DUP = 0x80            # PUBLISH bit 7
QOS_SHIFT = 5
QOS_MASK = 0x60
QOS2_FLAGS = 0b10 << QOS_SHIFT


class FrameError(Exception):
    """Bytes do not parse to a valid frame."""


@dataclass(frozen=True)
class Connect:
    client_id: str
    clean: bool = True
    duration: int = 60
    MSG_TYPE = 0x04

    def body(self) -> bytes:
        flags = FLAG_CLEAN_SESSION if self.clean else 0
        return struct.pack(">BBH", flags, 0x01, self.duration) + self.client_id.encode()


@dataclass(frozen=True)
class Connack:
    return_code: int = RC_ACCEPTED
    MSG_TYPE = 0x05

    def body(self) -> bytes:
        return struct.pack(">B", self.return_code)


@dataclass(frozen=True)
class Register:
    topic_id: int
    msg_id: int
    topic_name: str
    MSG_TYPE = 0x0A

    def body(self) -> bytes:
        return struct.pack(">HH", self.topic_id, self.msg_id) + self.topic_name.encode()


@dataclass(frozen=True)
class Regack:
    topic_id: int
    msg_id: int
    return_code: int = RC_ACCEPTED
    MSG_TYPE = 0x0B

    def body(self) -> bytes:
        return struct.pack(">HHB", self.topic_id, self.msg_id, self.return_code)


@dataclass(frozen=True)
class Publish:
    topic_id: int
    msg_id: int
    payload: bytes = field(repr=False, default=b"")
    dup: bool = False
    MSG_TYPE = 0x0C

    def body(self) -> bytes:
        flags = QOS2_FLAGS | (FLAG_DUP if self.dup else 0)
        return struct.pack(">BHH", flags, self.topic_id, self.msg_id) + self.payload


@dataclass(frozen=True)
class Pubcomp:
    msg_id: int
    MSG_TYPE = 0x0E

    def body(self) -> bytes:
        return struct.pack(">H", self.msg_id)


@dataclass(frozen=True)
class Pubrec:
    msg_id: int
    MSG_TYPE = 0x0F

    def body(self) -> bytes:
        return struct.pack(">H", self.msg_id)


@dataclass(frozen=True)
class Pubrel:
    msg_id: int
    MSG_TYPE = 0x10

    def body(self) -> bytes:
        return struct.pack(">H", self.msg_id)


@dataclass(frozen=True)
class Subscribe:
    msg_id: int
    topic_filter: str
    MSG_TYPE = 0x12

    def body(self) -> bytes:
        return struct.pack(">BH", QOS2_FLAGS, self.msg_id) + self.topic_filter.encode()


@dataclass(frozen=True)
class Suback:
    topic_id: int
    msg_id: int
    return_code: int = RC_ACCEPTED
    MSG_TYPE = 0x13

    def body(self) -> bytes:
        return struct.pack(">BHHB", QOS2_FLAGS, self.topic_id, self.msg_id,
                           self.return_code)


@dataclass(frozen=True)
class Pingreq:
    MSG_TYPE = 0x16

    def body(self) -> bytes:
        return b""


@dataclass(frozen=True)
class Pingresp:
    MSG_TYPE = 0x17

    def body(self) -> bytes:
        return b""


@dataclass(frozen=True)
class Disconnect:
    MSG_TYPE = 0x18

    def body(self) -> bytes:
        return b""


Frame = (Connect | Connack | Register | Regack | Publish | Pubrec | Pubrel
         | Pubcomp | Subscribe | Suback | Pingreq | Pingresp | Disconnect)


def serialize(frame: Frame) -> bytes:
    body = frame.body()
    size = 2 + len(body)  # short header
    if size <= 255:
        out = bytes([size, frame.MSG_TYPE]) + body
    else:
        size = 4 + len(body)  # escape + u16 length + msg_type
        out = struct.pack(">BHB", LONG_LENGTH_ESCAPE, size, frame.MSG_TYPE) + body
    if len(out) > MAX_FRAME:
        raise FrameError(f"frame of {len(out)} bytes exceeds {MAX_FRAME}")
    return out


def _decode_str(raw: bytes, what: str) -> str:
    try:
        return raw.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise FrameError(f"{what} is not UTF-8: {exc}") from None


def parse(datagram: bytes) -> Frame:
    """Parse one datagram; raises :class:`FrameError` on any malformation."""
    if len(datagram) < 2:
        raise FrameError("datagram shorter than header")
    if datagram[0] == LONG_LENGTH_ESCAPE:
        if len(datagram) < 4:
            raise FrameError("truncated long-form header")
        declared = struct.unpack(">H", datagram[1:3])[0]
        msg_type = datagram[3]
        body = datagram[4:]
        header = 4
    else:
        declared = datagram[0]
        msg_type = datagram[1]
        body = datagram[2:]
        header = 2
    if declared != len(datagram):
        raise FrameError(f"declared length {declared} != datagram {len(datagram)}")
    if len(datagram) > MAX_FRAME:
        raise FrameError(f"frame exceeds {MAX_FRAME} bytes")

    if msg_type == Connect.MSG_TYPE:
        if len(body) < 4:
            raise FrameError("CONNECT body too short")
        flags, protocol_id, duration = struct.unpack(">BBH", body[:4])
        if protocol_id != 0x01:
            raise FrameError(f"bad protocol id {protocol_id:#x}")
        client_id = _decode_str(body[4:], "client_id")
        if not client_id:
            raise FrameError("empty client_id")
        return Connect(client_id=client_id, clean=bool(flags & FLAG_CLEAN_SESSION),
                       duration=duration)
    if msg_type == Connack.MSG_TYPE:
        if len(body) != 1:
            raise FrameError("CONNACK body must be 1 byte")
        return Connack(return_code=body[0])
    if msg_type == Register.MSG_TYPE:
        if len(body) < 5:
            raise FrameError("REGISTER body too short")
        topic_id, msg_id = struct.unpack(">HH", body[:4])
        name = _decode_str(body[4:], "topic_name")
        if not name:
            raise FrameError("empty topic name")
        return Register(topic_id=topic_id, msg_id=msg_id, topic_name=name)
    if msg_type == Regack.MSG_TYPE:
        if len(body) != 5:
            raise FrameError("REGACK body must be 5 bytes")
        topic_id, msg_id, rc = struct.unpack(">HHB", body)
        return Regack(topic_id=topic_id, msg_id=msg_id, return_code=rc)
    if msg_type == Publish.MSG_TYPE:
        if len(body) < 5:
            raise FrameError("PUBLISH body too short")
        flags, topic_id, msg_id = struct.unpack(">BHH", body[:5])
        if flags & QOS_MASK != QOS2_FLAGS:
            raise FrameError(f"unsupported qos flags {flags:#x}")
        return Publish(topic_id=topic_id, msg_id=msg_id, payload=body[5:],
                       dup=bool(flags & FLAG_DUP))
    if msg_type in (Pubrec.MSG_TYPE, Pubrel.MSG_TYPE, Pubcomp.MSG_TYPE):
        if len(body) != 2:
            raise FrameError("ack body must be 2 bytes")
        msg_id = struct.unpack(">H", body)[0]
        cls = {Pubrec.MSG_TYPE: Pubrec, Pubrel.MSG_TYPE: Pubrel,
               Pubcomp.MSG_TYPE: Pubcomp}[msg_type]
        return cls(msg_id=msg_id)
    if msg_type == Subscribe.MSG_TYPE:
        if len(body) < 4:
            raise FrameError("SUBSCRIBE body too short")
        _, msg_id = struct.unpack(">BH", body[:3])
        topic_filter = _decode_str(body[3:], "topic_filter")
        if not topic_filter:
            raise FrameError("empty topic filter")
        return Subscribe(msg_id=msg_id, topic_filter=topic_filter)
    if msg_type == Suback.MSG_TYPE:
        if len(body) != 6:
            raise FrameError("SUBACK body must be 6 bytes")
        _, topic_id, msg_id, rc = struct.unpack(">BHHB", body)
        return Suback(topic_id=topic_id, msg_id=msg_id, return_code=rc)
    if msg_type == Pingreq.MSG_TYPE:
        if body:
            raise FrameError("PINGREQ carries no body")
        return Pingreq()
    if msg_type == Pingresp.MSG_TYPE:
        if body:
            raise FrameError("PINGRESP carries no body")
        return Pingresp()
    if msg_type == Disconnect.MSG_TYPE:
        if body:
            raise FrameError("DISCONNECT carries no body")
        return Disconnect()
    raise FrameError(f"unknown msg_type {msg_type:#x}")


def topic_matches(topic_filter: str, topic_name: str) -> bool:
    """Single-level '+' wildcard match, level-by-level."""
    filter_parts = topic_filter.split("/")
    name_parts = topic_name.split("/")
    if len(filter_parts) != len(name_parts):
        return False
    return all(f == "+" or f == n for f, n in zip(filter_parts, name_parts))
