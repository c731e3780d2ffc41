"""Binary capture-record codec, envelope compression, and end-of-task grouping.

Record layout, all integers big-endian:

    kind        u8    0x01 workflow-begin, 0x02 workflow-end,
                      0x03 task-begin,     0x04 task-end
    workflow_id u16 length + UTF-8 bytes
    task_id     u16 length + UTF-8 bytes (empty for workflow records)
    deps        u16 count, then each id as u16 length + UTF-8
    data        u16 count, then each payload:
                    id          u16 length + UTF-8
                    derivations u16 count, then ids as u16 length + UTF-8
                    attributes  u16 count, then each:
                        key   u16 length + UTF-8
                        tag   u8 (0x01 str, 0x02 int64, 0x03 float64, 0x04 bool)
                        value tagged (str: u16+UTF-8, int64/float64: 8 bytes,
                              bool: 1 byte)
    timestamp   u64 epoch milliseconds

Envelope layout: flags u8 (bit 0 = compressed), count u16, body. The body is
the concatenation of encoded records, passed through raw DEFLATE when the
compressed flag is set.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable, Union

MAX_U16 = 0xFFFF
MAX_ENVELOPE_BODY = 64 * 1024 * 1024  # decompression guard

Scalar = Union[str, int, float, bool]

_TAG_STR = 0x01
_TAG_INT = 0x02
_TAG_FLOAT = 0x03
_TAG_BOOL = 0x04

_INT64_MIN = -(1 << 63)
_INT64_MAX = (1 << 63) - 1


class WireError(Exception):
    """Base class for encode/decode failures."""


class StringTooLong(WireError):
    """A string field exceeds 65,535 UTF-8 bytes."""


class TooManyItems(WireError):
    """A list field exceeds 65,535 entries."""


class Malformed(WireError):
    """Bytes do not decode to a valid record or envelope."""


class RecordKind(IntEnum):
    WORKFLOW_BEGIN = 0x01
    WORKFLOW_END = 0x02
    TASK_BEGIN = 0x03
    TASK_END = 0x04


@dataclass(frozen=True)
class DataPayload:
    """One data record as carried inside a capture record.

    The owning workflow is implied by the enclosing record, so it is not
    repeated on the wire.
    """

    id: str
    derivations: tuple[str, ...] = ()
    attributes: tuple[tuple[str, Scalar], ...] = ()


@dataclass(frozen=True)
class CaptureRecord:
    """One provenance event: workflow/task begin/end with attached data."""

    kind: RecordKind
    workflow_id: str
    task_id: str = ""
    dependencies: tuple[str, ...] = ()
    data: tuple[DataPayload, ...] = ()
    timestamp: int = 0

    def is_valid(self) -> bool:
        if self.kind in (RecordKind.TASK_BEGIN, RecordKind.TASK_END):
            return bool(self.task_id)
        return not self.task_id and not self.data


def _pack_str(out: bytearray, s: str) -> None:
    raw = s.encode("utf-8")
    if len(raw) > MAX_U16:
        raise StringTooLong(f"string of {len(raw)} bytes exceeds u16 length")
    out += struct.pack(">H", len(raw))
    out += raw


def _pack_count(out: bytearray, n: int, what: str) -> None:
    if n > MAX_U16:
        raise TooManyItems(f"{what} has {n} entries, limit is {MAX_U16}")
    out += struct.pack(">H", n)


def encode_attr(out: bytearray, key: str, value: Scalar) -> None:
    _pack_str(out, key)
    # bool first: bool is a subclass of int
    if isinstance(value, bool):
        out.append(_TAG_BOOL)
        out.append(1 if value else 0)
    elif isinstance(value, int):
        if not _INT64_MIN <= value <= _INT64_MAX:
            raise WireError(f"integer attribute out of int64 range: {value}")
        out.append(_TAG_INT)
        out += struct.pack(">q", value)
    elif isinstance(value, float):
        out.append(_TAG_FLOAT)
        out += struct.pack(">d", value)
    elif isinstance(value, str):
        out.append(_TAG_STR)
        _pack_str(out, value)
    else:
        raise WireError(f"unsupported attribute value type: {type(value).__name__}")


def _encode_data(out: bytearray, payload: DataPayload) -> None:
    _pack_str(out, payload.id)
    _pack_count(out, len(payload.derivations), "derivations")
    for d in payload.derivations:
        _pack_str(out, d)
    _pack_count(out, len(payload.attributes), "attributes")
    for key, value in payload.attributes:
        encode_attr(out, key, value)


def encode_record(record: CaptureRecord) -> bytes:
    """Encode one capture record; deterministic for equal inputs."""
    out = bytearray()
    out.append(int(record.kind))
    _pack_str(out, record.workflow_id)
    _pack_str(out, record.task_id)
    _pack_count(out, len(record.dependencies), "dependencies")
    for dep in record.dependencies:
        _pack_str(out, dep)
    _pack_count(out, len(record.data), "data")
    for payload in record.data:
        _encode_data(out, payload)
    out += struct.pack(">Q", record.timestamp)
    return bytes(out)


class _Cursor:
    __slots__ = ("buf", "pos")

    def __init__(self, buf: bytes, pos: int = 0):
        self.buf = buf
        self.pos = pos

    def take(self, n: int) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise Malformed("truncated buffer")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def u8(self) -> int:
        return self.take(1)[0]

    def u16(self) -> int:
        return struct.unpack(">H", self.take(2))[0]

    def u64(self) -> int:
        return struct.unpack(">Q", self.take(8))[0]

    def string(self) -> str:
        raw = self.take(self.u16())
        try:
            return raw.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise Malformed(f"invalid UTF-8: {exc}") from None


def _decode_attr(cur: _Cursor) -> tuple[str, Scalar]:
    key = cur.string()
    tag = cur.u8()
    if tag == _TAG_STR:
        return key, cur.string()
    if tag == _TAG_INT:
        return key, struct.unpack(">q", cur.take(8))[0]
    if tag == _TAG_FLOAT:
        return key, struct.unpack(">d", cur.take(8))[0]
    if tag == _TAG_BOOL:
        b = cur.u8()
        if b not in (0, 1):
            raise Malformed(f"bool attribute byte {b:#x}")
        return key, bool(b)
    raise Malformed(f"unknown attribute tag {tag:#x}")


def _decode_data(cur: _Cursor) -> DataPayload:
    data_id = cur.string()
    derivations = tuple(cur.string() for _ in range(cur.u16()))
    attributes = tuple(_decode_attr(cur) for _ in range(cur.u16()))
    return DataPayload(id=data_id, derivations=derivations, attributes=attributes)


def decode_record(buf: bytes, offset: int = 0) -> tuple[CaptureRecord, int]:
    """Decode one record starting at ``offset``.

    Returns the record and the number of bytes consumed, so concatenated
    records can be decoded in sequence. Raises :class:`Malformed` on any
    framing violation; never raises anything else for arbitrary input.
    """
    cur = _Cursor(buf, offset)
    kind_byte = cur.u8()
    try:
        kind = RecordKind(kind_byte)
    except ValueError:
        raise Malformed(f"unknown record kind {kind_byte:#x}") from None
    workflow_id = cur.string()
    task_id = cur.string()
    dependencies = tuple(cur.string() for _ in range(cur.u16()))
    data = tuple(_decode_data(cur) for _ in range(cur.u16()))
    timestamp = cur.u64()
    record = CaptureRecord(
        kind=kind,
        workflow_id=workflow_id,
        task_id=task_id,
        dependencies=dependencies,
        data=data,
        timestamp=timestamp,
    )
    if not record.is_valid():
        raise Malformed("record violates kind/task_id constraints")
    return record, cur.pos - offset


_FLAG_COMPRESSED = 0x01


def seal_envelope(records: list[CaptureRecord] | tuple[CaptureRecord, ...], compress: bool) -> bytes:
    """Pack records into one envelope, optionally DEFLATE-compressing the body."""
    if not 1 <= len(records) <= MAX_U16:
        raise TooManyItems(f"envelope must carry 1..{MAX_U16} records, got {len(records)}")
    body = bytearray()
    for record in records:
        body += encode_record(record)
    flags = 0
    if compress:
        flags |= _FLAG_COMPRESSED
        comp = zlib.compressobj(6, zlib.DEFLATED, -zlib.MAX_WBITS)
        body = comp.compress(bytes(body)) + comp.flush()
    return struct.pack(">BH", flags, len(records)) + bytes(body)


def open_envelope(buf: bytes) -> list[CaptureRecord]:
    """Inverse of :func:`seal_envelope`; raises :class:`Malformed` on any failure."""
    if len(buf) < 3:
        raise Malformed("envelope shorter than header")
    flags, count = struct.unpack(">BH", buf[:3])
    if flags & ~_FLAG_COMPRESSED:
        raise Malformed(f"unknown envelope flags {flags:#x}")
    if count < 1:
        raise Malformed("envelope record count is zero")
    body = buf[3:]
    if flags & _FLAG_COMPRESSED:
        decomp = zlib.decompressobj(-zlib.MAX_WBITS)
        try:
            body = decomp.decompress(body, MAX_ENVELOPE_BODY)
        except zlib.error as exc:
            raise Malformed(f"decompression failed: {exc}") from None
        if decomp.unconsumed_tail or not decomp.eof:
            raise Malformed("compressed body truncated or oversized")
    records = []
    pos = 0
    for _ in range(count):
        record, used = decode_record(body, pos)
        records.append(record)
        pos += used
    if pos != len(body):
        raise Malformed(f"{len(body) - pos} trailing bytes after {count} records")
    return records


@dataclass
class FlushDecision:
    send_now: list[CaptureRecord]


@dataclass
class GroupingBuffer:
    """Buffers task-end records and releases them in batches of ``group_size``.

    Everything else passes straight through so workflow progress stays
    observable in real time; ``group_size`` 0 disables grouping entirely.
    """

    group_size: int = 0
    pending: list[CaptureRecord] = field(default_factory=list)

    def push(self, record: CaptureRecord) -> FlushDecision:
        if record.kind is not RecordKind.TASK_END or self.group_size <= 0:
            return FlushDecision(send_now=[record])
        self.pending.append(record)
        if len(self.pending) >= self.group_size:
            batch, self.pending = self.pending, []
            return FlushDecision(send_now=batch)
        return FlushDecision(send_now=[])

    def flush(self) -> list[CaptureRecord]:
        batch, self.pending = self.pending, []
        return batch


def group_push(buf: GroupingBuffer, record: CaptureRecord) -> FlushDecision:
    return buf.push(record)


def group_flush(buf: GroupingBuffer) -> list[CaptureRecord]:
    return buf.flush()


def encoded_size(record: CaptureRecord) -> int:
    """Closed-form size of ``encode_record(record)`` from the layout alone."""

    def s(text: str) -> int:
        return 2 + len(text.encode("utf-8"))

    total = 1 + s(record.workflow_id) + s(record.task_id)
    total += 2 + sum(s(d) for d in record.dependencies)
    total += 2
    for payload in record.data:
        total += s(payload.id)
        total += 2 + sum(s(d) for d in payload.derivations)
        total += 2
        for key, value in payload.attributes:
            total += s(key) + 1
            if isinstance(value, bool):
                total += 1
            elif isinstance(value, (int, float)):
                total += 8
            else:
                total += s(value)
    return total + 8


def records_of(envelopes: Iterable[bytes]) -> list[CaptureRecord]:
    out: list[CaptureRecord] = []
    for env in envelopes:
        out.extend(open_envelope(env))
    return out
