"""Server-side device registry with a checksummed single-file store.

File layout::

    b"ASOPSTOR"
    repeated: 0x01 | u32 length | record TLV      (records sorted by UUID)
    CRC-32C (big-endian u32) of every preceding byte
"""

from __future__ import annotations

import os
import struct
import threading
from dataclasses import dataclass, replace
from enum import IntEnum
from pathlib import Path

import crc32c

from . import wire
from .crypto import KemKeyPair, LongLivedToken, Role, chain_next
from .errors import ErrorCode, ProtocolError, StoreCorrupt

STORE_MAGIC = b"ASOPSTOR"
RECORD_FIELD = 0x01


class Status(IntEnum):
    Active = 0
    Revoked = 1


@dataclass(frozen=True)
class DeviceRecord:
    device_uuid: bytes
    d_s_pk: bytes
    s_d_pair: KemKeyPair
    t_d_head: LongLivedToken
    status: Status = Status.Active
    onboarded_at: int = 0
    # Owning account and its signature key, used to authorize revocation.
    account_id: str = ""
    owner_sig_pk: bytes = b""

    def to_bytes(self) -> bytes:
        return wire.encode_fields({
            1: self.device_uuid,
            2: self.d_s_pk,
            3: self.s_d_pair.public,
            4: self.s_d_pair.secret,
            5: wire.u64(self.s_d_pair.created_at),
            6: wire.u64(self.s_d_pair.validity),
            7: self.t_d_head.to_bytes(),
            8: bytes([self.status]),
            9: wire.u64(self.onboarded_at),
            10: self.account_id.encode(),
            11: self.owner_sig_pk,
        })

    @classmethod
    def from_bytes(cls, b: bytes) -> "DeviceRecord":
        f = dict(wire.decode_fields(b))
        pair = KemKeyPair(f[3], f[4], Role.Server, Role.Device,
                          wire.read_uint(f[5], 8), wire.read_uint(f[6], 8))
        if len(f[8]) != 1:
            raise wire.DecodeError("status must be one byte")
        return cls(
            device_uuid=f[1],
            d_s_pk=f[2],
            s_d_pair=pair,
            t_d_head=LongLivedToken.from_bytes(f[7]),
            status=Status(f[8][0]),
            onboarded_at=wire.read_uint(f[9], 8),
            account_id=f[10].decode(),
            owner_sig_pk=f[11],
        )


class Registry:
    """Device records keyed by UUID.

    All mutations take one lock, so a registry shared between server threads
    behaves as a single writer. ``enforce_revocation`` exists only so the
    simulator can run a deliberately broken twin.
    """

    def __init__(self, *, enforce_revocation: bool = True) -> None:
        self._records: dict[bytes, DeviceRecord] = {}
        self._lock = threading.RLock()
        self.enforce_revocation = enforce_revocation
        self.insert_count = 0

    def __len__(self) -> int:
        return len(self._records)

    def __contains__(self, device_uuid: bytes) -> bool:
        return device_uuid in self._records

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, Registry):
            return NotImplemented
        return self._records == other._records

    def records(self) -> list[DeviceRecord]:
        with self._lock:
            return [self._records[k] for k in sorted(self._records)]

    def insert(self, rec: DeviceRecord) -> None:
        with self._lock:
            if rec.device_uuid in self._records:
                raise ProtocolError(ErrorCode.DuplicateDevice, rec.device_uuid.hex())
            self._records[rec.device_uuid] = rec
            self.insert_count += 1

    def lookup(self, device_uuid: bytes) -> DeviceRecord:
        try:
            return self._records[device_uuid]
        except KeyError:
            raise ProtocolError(ErrorCode.UnknownDevice, device_uuid.hex()) from None

    def advance_token(self, device_uuid: bytes) -> LongLivedToken:
        with self._lock:
            rec = self.lookup(device_uuid)
            if rec.status is Status.Revoked and self.enforce_revocation:
                raise ProtocolError(ErrorCode.RevokedDevice, device_uuid.hex())
            head = chain_next(rec.t_d_head)
            self._records[device_uuid] = replace(rec, t_d_head=head)
            return head

    def revoke(self, device_uuid: bytes) -> None:
        with self._lock:
            rec = self.lookup(device_uuid)
            self._records[device_uuid] = replace(rec, status=Status.Revoked)

    # -- persistence --

    def to_bytes(self) -> bytes:
        out = bytearray(STORE_MAGIC)
        for rec in self.records():
            blob = rec.to_bytes()
            out += struct.pack(">BI", RECORD_FIELD, len(blob)) + blob
        out += struct.pack(">I", crc32c.crc32c(bytes(out)))
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes, **kwargs) -> "Registry":
        if len(data) < len(STORE_MAGIC) + 4 or data[:len(STORE_MAGIC)] != STORE_MAGIC:
            raise StoreCorrupt("missing store magic")
        body, (crc,) = data[:-4], struct.unpack(">I", data[-4:])
        if crc32c.crc32c(body) != crc:
            raise StoreCorrupt("checksum mismatch")
        reg = cls(**kwargs)
        pos = len(STORE_MAGIC)
        try:
            while pos < len(body):
                if len(body) - pos < 5:
                    raise StoreCorrupt("truncated record header")
                fid, length = struct.unpack_from(">BI", body, pos)
                pos += 5
                if fid != RECORD_FIELD or length > len(body) - pos:
                    raise StoreCorrupt("bad record framing")
                rec = DeviceRecord.from_bytes(body[pos:pos + length])
                pos += length
                if rec.device_uuid in reg._records:
                    raise StoreCorrupt(f"duplicate device {rec.device_uuid.hex()}")
                reg._records[rec.device_uuid] = rec
        except (wire.DecodeError, KeyError, ValueError, UnicodeDecodeError) as exc:
            raise StoreCorrupt(f"bad record: {exc}") from None
        return reg

    def persist(self, path: str | os.PathLike) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with self._lock:
            data = self.to_bytes()
        tmp.write_bytes(data)
        os.replace(tmp, path)

    @classmethod
    def load(cls, path: str | os.PathLike, **kwargs) -> "Registry":
        return cls.from_bytes(Path(path).read_bytes(), **kwargs)
