"""Cryptographic primitives behind a swappable backend.

Two backends exist. ``toy`` is deterministic and insecure: hash-based KEM
and an HMAC "signature" whose verifier looks secrets up in a key directory.
It exists so transcripts are reproducible byte for byte. ``pqc`` wraps
ML-KEM (Kyber) and ML-DSA (Dilithium) from the optional ``kyber-py`` and
``dilithium-py`` packages.

Public-key encryption is KEM-encapsulate, HKDF-SHA-256, then AES-256-GCM,
with the caller's context string bound both into the key and as AAD.
"""

from __future__ import annotations

import hashlib
import hmac
import json
import os
import threading
from dataclasses import dataclass
from enum import Enum
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF, HKDFExpand

from . import wire
from .errors import AuthenticationError, CryptoError, KeyExpired

HKDF_INFO_PREFIX = b"ASOP-v1"
NONCE_LEN = 12
TAG_LEN = 16
ROOT_KEY_VALIDITY = 24 * 3600
U64_MAX = 2**64 - 1


class Role(str, Enum):
    Server = "Server"
    Authenticator = "Authenticator"
    Device = "Device"


class TotpHash(str, Enum):
    SHA1 = "SHA1"
    SHA256 = "SHA256"


@dataclass(frozen=True)
class KemKeyPair:
    public: bytes
    secret: bytes
    owner_role: Role
    peer_role: Role
    created_at: int = 0
    validity: int = ROOT_KEY_VALIDITY

    @property
    def expires_at(self) -> int:
        return self.created_at + self.validity

    def is_fresh(self, now: float) -> bool:
        return self.created_at <= now < self.expires_at


@dataclass(frozen=True)
class SigKeyPair:
    public: bytes
    secret: bytes
    owner_role: Role


@dataclass(frozen=True)
class NetworkSessionKey:
    """The authenticator/device symmetric key from network-layer onboarding."""

    key: bytes

    def __post_init__(self):
        if len(self.key) != 32:
            raise CryptoError("network session key must be 32 bytes")


@dataclass(frozen=True)
class TransientToken:
    code: str
    issued_at: int
    step: int = 30
    secret_id: str = ""


@dataclass(frozen=True)
class LongLivedToken:
    value: bytes
    counter: int
    chain_key: bytes

    def to_bytes(self) -> bytes:
        return wire.encode_fields({1: self.value, 2: wire.u64(self.counter), 3: self.chain_key})

    @classmethod
    def from_bytes(cls, b: bytes) -> "LongLivedToken":
        f = dict(wire.decode_fields(b))
        try:
            value, counter, chain_key = f[1], wire.read_uint(f[2], 8), f[3]
        except KeyError as exc:
            raise wire.DecodeError(f"token field {exc} missing") from None
        if len(value) != 32 or len(chain_key) != 32:
            raise wire.DecodeError("token value and chain key must be 32 bytes")
        return cls(value, counter, chain_key)


@dataclass(frozen=True)
class HybridCiphertext:
    kem_ct: bytes
    nonce: bytes
    aead_ct: bytes

    def to_bytes(self) -> bytes:
        return wire.encode_fields({1: self.kem_ct, 2: self.nonce, 3: self.aead_ct})

    @classmethod
    def from_bytes(cls, b: bytes) -> "HybridCiphertext":
        f = dict(wire.decode_fields(b))
        if set(f) != {1, 2, 3}:
            raise wire.DecodeError("hybrid ciphertext needs exactly fields 1..3")
        return cls(f[1], f[2], f[3])


# -- backends ---------------------------------------------------------------


class ToyKeyDirectory:
    """pk -> sk lookup used by the toy verifier.

    Mutation is serialized; with a ``path`` the directory is shared between
    processes through a JSON file (re-read on a lookup miss).
    """

    def __init__(self, path: str | os.PathLike | None = None) -> None:
        self._keys: dict[bytes, bytes] = {}
        self._lock = threading.Lock()
        self.path = Path(path) if path else None
        if self.path:
            self._reload()

    def _reload(self) -> None:
        if self.path and self.path.exists():
            data = json.loads(self.path.read_text() or "{}")
            self._keys.update({bytes.fromhex(k): bytes.fromhex(v) for k, v in data.items()})

    def add(self, pk: bytes, sk: bytes) -> None:
        with self._lock:
            self._keys[pk] = sk
            if self.path:
                self._reload()
                tmp = self.path.with_suffix(self.path.suffix + ".tmp")
                tmp.write_text(json.dumps({k.hex(): v.hex() for k, v in sorted(self._keys.items())}))
                tmp.replace(self.path)

    def lookup(self, pk: bytes) -> bytes | None:
        sk = self._keys.get(pk)
        if sk is None and self.path:
            with self._lock:
                self._reload()
            sk = self._keys.get(pk)
        return sk


class Backend:
    name = "abstract"

    def kem_keypair(self, seed: bytes) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def encapsulate(self, pk: bytes, eph_seed: bytes) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def decapsulate(self, sk: bytes, kem_ct: bytes) -> bytes:
        raise NotImplementedError

    def sig_keypair(self, seed: bytes) -> tuple[bytes, bytes]:
        raise NotImplementedError

    def sig_public(self, sk: bytes) -> bytes:
        raise NotImplementedError

    def sign(self, sk: bytes, message: bytes) -> bytes:
        raise NotImplementedError

    def verify(self, pk: bytes, message: bytes, sig: bytes) -> bool:
        raise NotImplementedError


def _sha256(*parts: bytes) -> bytes:
    return hashlib.sha256(b"".join(parts)).digest()


class ToyBackend(Backend):
    name = "toy"

    def __init__(self, directory: ToyKeyDirectory | None = None) -> None:
        self.directory = directory or ToyKeyDirectory()

    def kem_keypair(self, seed):
        sk = _sha256(seed)
        return _sha256(sk, b"pk"), sk

    def encapsulate(self, pk, eph_seed):
        if len(pk) != 32:
            raise CryptoError("toy KEM public key must be 32 bytes")
        kem_ct = _sha256(pk, eph_seed)
        return kem_ct, _sha256(pk, kem_ct)

    def decapsulate(self, sk, kem_ct):
        if len(sk) != 32 or len(kem_ct) != 32:
            raise CryptoError("toy KEM secret and ciphertext must be 32 bytes")
        return _sha256(_sha256(sk, b"pk"), kem_ct)

    def sig_keypair(self, seed):
        pk = self.sig_public(seed)
        self.directory.add(pk, bytes(seed))
        return pk, bytes(seed)

    def sig_public(self, sk):
        if not sk:
            raise CryptoError("empty signing key")
        return _sha256(sk)

    def sign(self, sk, message):
        if not sk:
            raise CryptoError("empty signing key")
        return hmac.new(sk, message, hashlib.sha256).digest()

    def verify(self, pk, message, sig):
        sk = self.directory.lookup(bytes(pk))
        if sk is None or len(sig) != 32:
            return False
        return hmac.compare_digest(self.sign(sk, message), bytes(sig))


class PqcBackend(Backend):
    """ML-KEM + ML-DSA. Seeds are expanded with SHAKE-256 where the
    underlying scheme wants more than 32 bytes; callers supply fresh
    randomness in production use."""

    name = "pqc"
    KEM_SETS = {512: "ML_KEM_512", 768: "ML_KEM_768", 1024: "ML_KEM_1024"}

    def __init__(self, kem_level: int = 768) -> None:
        try:
            from dilithium_py import ml_dsa
            from kyber_py import ml_kem
        except ImportError as exc:  # pragma: no cover - depends on extras
            raise CryptoError("pqc backend needs the 'pqc' extra (kyber-py, dilithium-py)") from exc
        if kem_level not in self.KEM_SETS:
            raise CryptoError(f"unsupported ML-KEM parameter set {kem_level}")
        self.kem = getattr(ml_kem, self.KEM_SETS[kem_level])
        self.dsa = ml_dsa.ML_DSA_65

    def kem_keypair(self, seed):
        ek, dk = self.kem.key_derive(hashlib.shake_256(b"kem" + seed).digest(64))
        return ek, dk

    def encapsulate(self, pk, eph_seed):
        try:
            shared, ct = self.kem._encaps_internal(pk, eph_seed)
        except (ValueError, TypeError, IndexError) as exc:
            raise CryptoError(f"malformed ML-KEM public key: {exc}") from None
        return ct, shared

    def decapsulate(self, sk, kem_ct):
        try:
            return self.kem.decaps(sk, kem_ct)
        except (ValueError, TypeError, IndexError) as exc:
            raise CryptoError(f"malformed ML-KEM input: {exc}") from None

    def sig_keypair(self, seed):
        return self.dsa.key_derive(seed)

    def sig_public(self, sk):
        try:
            return self.dsa.pk_from_sk(sk)
        except Exception as exc:
            raise CryptoError(f"malformed ML-DSA secret key: {exc}") from None

    def sign(self, sk, message):
        try:
            return self.dsa.sign(sk, message)
        except Exception as exc:
            raise CryptoError(f"malformed ML-DSA secret key: {exc}") from None

    def verify(self, pk, message, sig):
        try:
            return bool(self.dsa.verify(pk, message, sig))
        except Exception:
            return False


_default_toy = ToyBackend()


def get_backend(name: str | Backend | None = None, **options) -> Backend:
    if isinstance(name, Backend):
        return name
    if name in (None, "toy"):
        if options:
            return ToyBackend(**options)
        return _default_toy
    if name == "pqc":
        return PqcBackend(**options)
    raise CryptoError(f"unknown backend {name!r}")


# -- KEM, signatures, sealing --------------------------------------------------


def _check_seed(seed: bytes, what: str = "seed") -> None:
    if len(seed) != 32:
        raise CryptoError(f"{what} must be 32 bytes")


def kem_keygen(seed: bytes, owner: Role, peer: Role, validity: int = ROOT_KEY_VALIDITY,
               *, created_at: int = 0, backend=None) -> KemKeyPair:
    _check_seed(seed)
    pk, sk = get_backend(backend).kem_keypair(seed)
    return KemKeyPair(pk, sk, Role(owner), Role(peer), int(created_at), int(validity))


def kem_encapsulate(pk: bytes, eph_seed: bytes, *, backend=None) -> tuple[bytes, bytes]:
    _check_seed(eph_seed, "ephemeral seed")
    return get_backend(backend).encapsulate(bytes(pk), eph_seed)


def kem_decapsulate(sk: bytes, kem_ct: bytes, *, backend=None) -> bytes:
    return get_backend(backend).decapsulate(bytes(sk), bytes(kem_ct))


def ensure_fresh(pair: KemKeyPair, now: float) -> None:
    if not pair.is_fresh(now):
        raise KeyExpired(f"{pair.owner_role.value}->{pair.peer_role.value} key expired at {pair.expires_at}")


def sig_keygen(seed: bytes, owner: Role, *, backend=None) -> SigKeyPair:
    _check_seed(seed)
    pk, sk = get_backend(backend).sig_keypair(seed)
    return SigKeyPair(pk, sk, Role(owner))


def sign(sk: bytes, message: bytes, *, backend=None) -> bytes:
    return get_backend(backend).sign(bytes(sk), bytes(message))


def verify(pk: bytes, message: bytes, sig: bytes, *, backend=None) -> bool:
    try:
        return get_backend(backend).verify(bytes(pk), bytes(message), bytes(sig))
    except Exception:
        return False


def _derive_key(shared: bytes, context: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None,
                info=HKDF_INFO_PREFIX + context).derive(shared)


def seal(recipient_pk: bytes, plaintext: bytes, context: bytes, eph_seed: bytes,
         nonce: bytes, *, backend=None) -> HybridCiphertext:
    if len(nonce) != NONCE_LEN:
        raise CryptoError("nonce must be 12 bytes")
    kem_ct, shared = kem_encapsulate(recipient_pk, eph_seed, backend=backend)
    key = _derive_key(shared, context)
    return HybridCiphertext(kem_ct, bytes(nonce), AESGCM(key).encrypt(nonce, bytes(plaintext), context))


def open_sealed(recipient_sk: bytes, ct: HybridCiphertext, context: bytes, *, backend=None) -> bytes:
    if len(ct.nonce) != NONCE_LEN or len(ct.aead_ct) < TAG_LEN:
        raise AuthenticationError("malformed hybrid ciphertext")
    try:
        shared = kem_decapsulate(recipient_sk, ct.kem_ct, backend=backend)
    except CryptoError as exc:
        raise AuthenticationError(str(exc)) from None
    try:
        return AESGCM(_derive_key(shared, context)).decrypt(ct.nonce, ct.aead_ct, context)
    except InvalidTag:
        raise AuthenticationError("hybrid open failed") from None


open = open_sealed  # noqa: A001 - operation name used throughout the docs


def aead_seal(ck: NetworkSessionKey, nonce: bytes, plaintext: bytes, aad: bytes) -> bytes:
    if len(nonce) != NONCE_LEN:
        raise CryptoError("nonce must be 12 bytes")
    return AESGCM(ck.key).encrypt(nonce, plaintext, aad)


def aead_open(ck: NetworkSessionKey, nonce: bytes, ct: bytes, aad: bytes) -> bytes:
    if len(nonce) != NONCE_LEN:
        raise AuthenticationError("nonce must be 12 bytes")
    try:
        return AESGCM(ck.key).decrypt(nonce, ct, aad)
    except InvalidTag:
        raise AuthenticationError("AEAD open failed") from None


# -- TOTP ----------------------------------------------------------------------

_HASHES = {TotpHash.SHA1: hashlib.sha1, TotpHash.SHA256: hashlib.sha256}


def totp_generate(secret: bytes, unix_time: float, step: int = 30, digits: int = 8,
                  hash: TotpHash | str = TotpHash.SHA1) -> str:
    if digits not in (6, 8):
        raise ValueError("digits must be 6 or 8")
    if step <= 0:
        raise ValueError("step must be positive")
    return _hotp(secret, int(unix_time // step), digits, TotpHash(hash))


def _hotp(secret: bytes, counter: int, digits: int, alg: TotpHash) -> str:
    mac = hmac.new(secret, counter.to_bytes(8, "big"), _HASHES[alg]).digest()
    offset = mac[-1] & 0x0F
    binary = int.from_bytes(mac[offset:offset + 4], "big") & 0x7FFFFFFF
    return str(binary % 10**digits).zfill(digits)


def totp_validate(secret: bytes, code: str, now: float, step: int = 30, skew_steps: int = 1,
                  digits: int = 8, hash: TotpHash | str = TotpHash.SHA1) -> bool:
    if skew_steps < 0:
        raise ValueError("skew_steps must be >= 0")
    if len(code) != digits or not code.isdigit():
        return False
    centre = int(now // step)
    hits = [hmac.compare_digest(_hotp(secret, c, digits, TotpHash(hash)), code)
            for c in range(max(centre - skew_steps, 0), centre + skew_steps + 1)]
    return any(hits)


# -- token chain, nonces, seeds ------------------------------------------------


def chain_next(token: LongLivedToken) -> LongLivedToken:
    if token.counter >= U64_MAX:
        raise OverflowError("long-lived token counter exhausted")
    value = hmac.new(token.chain_key, token.value + token.counter.to_bytes(8, "big"),
                     hashlib.sha256).digest()
    return LongLivedToken(value, token.counter + 1, token.chain_key)


class NonceCounter:
    """Monotonic 96-bit nonce source; one instance per key."""

    def __init__(self, start: int = 0) -> None:
        self.value = start

    def next(self) -> bytes:
        if self.value >= 2 ** (8 * NONCE_LEN):
            raise OverflowError("nonce space exhausted")
        n = self.value.to_bytes(NONCE_LEN, "big")
        self.value += 1
        return n


class SeedStream:
    """Labelled 32-byte seeds expanded from one root seed.

    Deterministic given the root, which is what makes toy transcripts
    reproducible. Use ``SeedStream.random()`` outside tests.
    """

    def __init__(self, root: bytes) -> None:
        _check_seed(root, "root seed")
        self.root = bytes(root)
        self.counter = 0

    @classmethod
    def random(cls) -> "SeedStream":
        return cls(os.urandom(32))

    def next(self, label: bytes = b"") -> bytes:
        info = label + self.counter.to_bytes(8, "big")
        self.counter += 1
        return HKDFExpand(algorithm=hashes.SHA256(), length=32, info=info).derive(self.root)
