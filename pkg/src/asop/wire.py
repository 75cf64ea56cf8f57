"""Canonical binary framing for ASOP messages.

A frame is ``b"ASOP" | version | msg_type`` followed by a TLV sequence. Each
TLV item is ``field_id (1 byte) | length (4 bytes, big-endian) | value`` and
field ids must be strictly ascending, so equal messages have equal bytes.
The same TLV rules are used for payloads nested inside sealed fields.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from enum import IntEnum
from typing import Iterable, Mapping

MAGIC = b"ASOP"
VERSION = 0x01
HEADER_LEN = len(MAGIC) + 2
TLV_HEADER_LEN = 5
MAX_VALUE_LEN = 2**32 - 1


class MsgType(IntEnum):
    REGISTER_INIT = 0x01
    REGISTER_ACK = 0x02
    ADD_DEVICE_REQUEST = 0x03
    ONBOARD_OFFER = 0x04
    DEVICE_PROVISION = 0x05
    DEVICE_REGISTER = 0x06
    DEVICE_ACCEPT = 0x07
    ONBOARD_NOTIFY = 0x08
    ERROR = 0x09
    # Operational messages used by the TCP demo after onboarding.
    REVOKE_REQUEST = 0x10
    TOKEN_USE = 0x11
    ACK = 0x12


class DecodeError(ValueError):
    pass


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


class DuplicateField(DecodeError):
    pass


class NonCanonicalOrder(DecodeError):
    pass


class Truncated(DecodeError):
    pass


class TrailingBytes(DecodeError):
    pass


class EncodeError(ValueError):
    pass


Fields = tuple[tuple[int, bytes], ...]


@dataclass(frozen=True)
class Message:
    msg_type: MsgType
    fields: Fields = ()

    @classmethod
    def build(cls, msg_type: MsgType, values: Mapping[int, bytes] | None = None) -> "Message":
        """Build a canonical message from an id -> value mapping."""
        items = tuple(sorted((int(k), bytes(v)) for k, v in (values or {}).items()))
        return cls(MsgType(msg_type), items)

    def get(self, field_id: int, default: bytes | None = None) -> bytes | None:
        for fid, value in self.fields:
            if fid == field_id:
                return value
        return default

    def __getitem__(self, field_id: int) -> bytes:
        value = self.get(field_id)
        if value is None:
            raise KeyError(field_id)
        return value

    def as_dict(self) -> dict[int, bytes]:
        return dict(self.fields)


def _check_canonical(fields: Iterable[tuple[int, bytes]]) -> None:
    prev = -1
    for fid, value in fields:
        if not 0 <= fid <= 0xFF:
            raise EncodeError(f"field id {fid} out of range")
        if fid == prev:
            raise EncodeError(f"duplicate field id {fid:#04x}")
        if fid < prev:
            raise EncodeError(f"field id {fid:#04x} out of canonical order")
        if len(value) > MAX_VALUE_LEN:
            raise EncodeError("value exceeds 2^32-1 bytes")
        prev = fid


def encode_fields(fields: Iterable[tuple[int, bytes]] | Mapping[int, bytes]) -> bytes:
    """TLV-encode fields; a mapping is sorted, a sequence must already be canonical."""
    if isinstance(fields, Mapping):
        fields = sorted(fields.items())
    fields = [(int(fid), bytes(v)) for fid, v in fields]
    _check_canonical(fields)
    out = bytearray()
    for fid, value in fields:
        out += struct.pack(">BI", fid, len(value))
        out += value
    return bytes(out)


def decode_fields(data: bytes) -> Fields:
    """Parse a complete TLV sequence, rejecting anything non-canonical.

    A value whose declared length runs past the buffer raises ``Truncated``;
    1 to 4 leftover bytes that cannot form an item header raise
    ``TrailingBytes``.
    """
    data = memoryview(bytes(data))
    pos = 0
    prev = -1
    out = []
    while pos < len(data):
        if len(data) - pos < TLV_HEADER_LEN:
            raise TrailingBytes(f"{len(data) - pos} bytes after last field")
        fid, length = struct.unpack_from(">BI", data, pos)
        pos += TLV_HEADER_LEN
        if length > len(data) - pos:
            raise Truncated(f"field {fid:#04x} declares {length} bytes, {len(data) - pos} left")
        if fid == prev:
            raise DuplicateField(f"field {fid:#04x} repeated")
        if fid < prev:
            raise NonCanonicalOrder(f"field {fid:#04x} after {prev:#04x}")
        out.append((fid, bytes(data[pos:pos + length])))
        pos += length
        prev = fid
    return tuple(out)


def encode(m: Message) -> bytes:
    return MAGIC + bytes([VERSION, int(m.msg_type)]) + encode_fields(m.fields)


def decode(b: bytes) -> Message:
    b = bytes(b)
    if len(b) < len(MAGIC):
        if MAGIC.startswith(b):
            raise Truncated("frame shorter than magic")
        raise BadMagic("bad magic")
    if b[:4] != MAGIC:
        raise BadMagic(f"bad magic {b[:4]!r}")
    if len(b) < HEADER_LEN:
        raise Truncated("frame shorter than header")
    if b[4] != VERSION:
        raise BadVersion(f"version {b[4]:#04x}")
    try:
        msg_type = MsgType(b[5])
    except ValueError:
        raise UnknownType(f"message type {b[5]:#04x}") from None
    return Message(msg_type, decode_fields(b[HEADER_LEN:]))


def peek_type(b: bytes) -> MsgType | None:
    """Best-effort message type of a frame, for logging only."""
    try:
        return MsgType(b[5])
    except (IndexError, ValueError):
        return None


# Integer helpers for fixed-width fields.

def u16(n: int) -> bytes:
    return n.to_bytes(2, "big")


def u64(n: int) -> bytes:
    return n.to_bytes(8, "big")


def read_uint(b: bytes, width: int) -> int:
    if len(b) != width:
        raise DecodeError(f"expected {width}-byte integer, got {len(b)}")
    return int.from_bytes(b, "big")
