"""Minimal ownership-voucher chain, kept as a baseline for comparison.

Each hop signs ``TLV(device_guid, next_owner_pk)`` with the current owner's
key, starting from the manufacturer anchor. Every seller in the chain must
know the next buyer's public key in advance, and any one of them can stall
the transfer by not signing. ASOP onboarding needs none of this.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from . import crypto, wire
from .errors import CryptoError


class WrongSigner(CryptoError):
    pass


@dataclass(frozen=True)
class VoucherEntry:
    owner_pk: bytes
    signature: bytes


@dataclass(frozen=True)
class Voucher:
    device_guid: bytes
    anchor_pk: bytes
    entries: tuple[VoucherEntry, ...] = field(default_factory=tuple)

    @property
    def current_owner_pk(self) -> bytes:
        return self.entries[-1].owner_pk if self.entries else self.anchor_pk


def _link_payload(device_guid: bytes, owner_pk: bytes) -> bytes:
    return wire.encode_fields({1: device_guid, 2: owner_pk})


def extend(v: Voucher, next_owner_pk: bytes, current_owner_sk: bytes, *, backend=None) -> Voucher:
    b = crypto.get_backend(backend)
    if b.sig_public(current_owner_sk) != v.current_owner_pk:
        raise WrongSigner("signing key does not belong to the current owner")
    sig = b.sign(current_owner_sk, _link_payload(v.device_guid, next_owner_pk))
    return replace(v, entries=v.entries + (VoucherEntry(bytes(next_owner_pk), sig),))


def verify_chain(v: Voucher, *, backend=None) -> bool:
    signer = v.anchor_pk
    for entry in v.entries:
        if not crypto.verify(signer, _link_payload(v.device_guid, entry.owner_pk), entry.signature,
                             backend=backend):
            return False
        signer = entry.owner_pk
    return True
