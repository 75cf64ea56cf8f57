"""Exception types shared across the package."""

from __future__ import annotations

from enum import IntEnum


class ErrorCode(IntEnum):
    """Two-byte codes carried in ERROR frames and recorded in transcripts."""

    DecryptFail = 0x0001
    BadSignature = 0x0002
    TokenExpired = 0x0003
    TokenReplayed = 0x0004
    DuplicateDevice = 0x0005
    SessionExpired = 0x0006
    NoSession = 0x0007
    DuplicateSession = 0x0008
    WrongPhase = 0x0009
    ProtocolViolation = 0x000A
    MalformedMessage = 0x000B
    UnknownDevice = 0x000C
    RevokedDevice = 0x000D
    FrameTooLarge = 0x000E
    BadToken = 0x000F
    Unauthorized = 0x0010
    Internal = 0x00FF


class AsopError(Exception):
    pass


class CryptoError(AsopError):
    """Malformed key material or backend failure."""


class AuthenticationError(CryptoError):
    """AEAD or hybrid open rejected the ciphertext."""


class KeyExpired(CryptoError):
    pass


class ProtocolError(AsopError):
    def __init__(self, code: ErrorCode, detail: str = "") -> None:
        self.code = ErrorCode(code)
        self.detail = detail
        super().__init__(f"{self.code.name}: {detail}" if detail else self.code.name)


class StoreCorrupt(AsopError):
    """Store file failed magic, checksum, or structural validation."""
