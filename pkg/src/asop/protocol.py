"""State machines for the Authenticator, Device and Server roles.

Every handler is a function taking an immutable state value plus an inbound
message and returning the new state and any outbound messages. On error a
handler raises ``ProtocolError`` and the caller keeps the old state, so a
rejected message can never move a machine.

Randomness (key seeds, KEM ephemerals) is drawn from a root seed and a
counter stored inside each state; advancing the counter is part of the
returned state.
"""

from __future__ import annotations

import hashlib
import hmac
import threading
import uuid
from dataclasses import dataclass, field, replace
from enum import IntEnum

from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.kdf.hkdf import HKDFExpand

from . import crypto, wire
from .crypto import (
    HybridCiphertext,
    KemKeyPair,
    LongLivedToken,
    NetworkSessionKey,
    Role,
    SigKeyPair,
    TotpHash,
)
from .errors import AuthenticationError, CryptoError, ErrorCode, ProtocolError
from .registry import DeviceRecord, Registry, Status
from .wire import Message, MsgType

CONNECTED = b"connected"
DEVICE_KEY_VALIDITY = 365 * 24 * 3600

# Seal contexts; each sealed payload is bound to the message it travels in.
CTX_OFFER = b"offer"
CTX_PROVISION = b"provision"
CTX_TOKEN = b"tok"
CTX_REGISTER = b"register"
CTX_ACCEPT = b"accept"
CTX_NOTIFY = b"notify"
CTX_TOKEN_USE = b"token-use"
CTX_REVOKE = b"revoke"


@dataclass(frozen=True)
class Mutations:
    """Defense switches. All on in real use; the simulator turns single ones
    off to prove its scenarios notice the regression."""

    single_use_token: bool = True
    check_totp: bool = True
    check_signature: bool = True
    protect_provision: bool = True
    seal_offer: bool = True
    check_session_expiry: bool = True
    check_revocation: bool = True


@dataclass(frozen=True)
class ProtocolConfig:
    backend: crypto.Backend = field(default_factory=crypto.get_backend)
    root_key_validity: int = crypto.ROOT_KEY_VALIDITY
    device_key_validity: int = DEVICE_KEY_VALIDITY
    totp_step: int = 30
    totp_digits: int = 8
    totp_hash: TotpHash = TotpHash.SHA1
    skew_steps: int = 1
    mutations: Mutations = Mutations()


@dataclass(frozen=True)
class ServerApiAddress:
    host: str
    port: int
    path: str = ""

    def __post_init__(self):
        if not self.host:
            raise ValueError("server address needs a host")
        if not 0 < self.port < 65536:
            raise ValueError(f"bad port {self.port}")

    def to_bytes(self) -> bytes:
        return wire.encode_fields({1: self.host.encode(), 2: wire.u16(self.port), 3: self.path.encode()})

    @classmethod
    def from_bytes(cls, b: bytes) -> "ServerApiAddress":
        f = dict(wire.decode_fields(b))
        return cls(f[1].decode(), wire.read_uint(f[2], 2), f[3].decode())


@dataclass(frozen=True)
class DeviceUuid:
    value: bytes

    def __post_init__(self):
        if len(self.value) != 16:
            raise ValueError("device UUID must be 16 bytes")
        if self.value[6] >> 4 != 4 or self.value[8] >> 6 != 0b10:
            raise ValueError("device UUID must use the version 4 layout")

    @classmethod
    def from_seed(cls, seed: bytes) -> "DeviceUuid":
        return cls(uuid.UUID(bytes=seed[:16], version=4).bytes)

    def __str__(self) -> str:
        return str(uuid.UUID(bytes=self.value))


def key_id(pk: bytes) -> bytes:
    """Cleartext routing hint naming the recipient key of a sealed frame."""
    return hashlib.sha256(pk).digest()[:16]


def _draw(root: bytes, counter: int, label: bytes) -> bytes:
    info = label + counter.to_bytes(8, "big")
    return HKDFExpand(algorithm=hashes.SHA256(), length=32, info=info).derive(root)


def _nonce(n: int) -> bytes:
    return n.to_bytes(crypto.NONCE_LEN, "big")


def _fields(m: Message, *ids: int) -> list[bytes]:
    try:
        return [m[i] for i in ids]
    except KeyError as exc:
        raise ProtocolError(ErrorCode.MalformedMessage, f"{m.msg_type.name} lacks field {exc}") from None


def _payload(b: bytes, *ids: int) -> list[bytes]:
    try:
        f = dict(wire.decode_fields(b))
        return [f[i] for i in ids]
    except (wire.DecodeError, KeyError) as exc:
        raise ProtocolError(ErrorCode.MalformedMessage, f"bad sealed payload: {exc}") from None


def _expect(m: Message, t: MsgType) -> None:
    if m.msg_type is not t:
        raise ProtocolError(ErrorCode.ProtocolViolation, f"expected {t.name}, got {m.msg_type.name}")


def _open(cfg: ProtocolConfig, sk: bytes, blob: bytes, ctx: bytes) -> bytes:
    try:
        return crypto.open_sealed(sk, HybridCiphertext.from_bytes(blob), ctx, backend=cfg.backend)
    except (AuthenticationError, wire.DecodeError) as exc:
        raise ProtocolError(ErrorCode.DecryptFail, str(exc)) from None


def error_message(code: ErrorCode, detail: str = "") -> Message:
    values = {1: wire.u16(code)}
    if detail:
        values[2] = detail.encode()
    return Message.build(MsgType.ERROR, values)


def parse_error(m: Message) -> ProtocolError:
    code = wire.read_uint(m[1], 2)
    try:
        code = ErrorCode(code)
    except ValueError:
        code = ErrorCode.Internal
    return ProtocolError(code, (m.get(2) or b"").decode(errors="replace"))


# -- Authenticator ---------------------------------------------------------------------


class AuthPhase(IntEnum):
    Idle = 0
    Registered = 1
    AwaitOffer = 2
    OfferForwarded = 3
    Done = 4


@dataclass(frozen=True)
class AuthenticatorState:
    account_id: str
    kem_pair: KemKeyPair
    sig_pair: SigKeyPair
    ck: NetworkSessionKey
    seed_root: bytes
    phase: AuthPhase = AuthPhase.Idle
    server_kem_pk: bytes = b""
    session_expiry: int = 0
    seed_counter: int = 0
    nonce_counter: int = 0
    ck_nonce_counter: int = 0
    connected_device: bytes | None = None


def authenticator_new(account_id: str, ck: NetworkSessionKey, seed_root: bytes,
                      cfg: ProtocolConfig, now: int = 0) -> AuthenticatorState:
    kem_pair = crypto.kem_keygen(_draw(seed_root, 0, b"A-kem"), Role.Authenticator, Role.Server,
                                 cfg.root_key_validity, created_at=now, backend=cfg.backend)
    sig_pair = crypto.sig_keygen(_draw(seed_root, 1, b"A-sig"), Role.Authenticator, backend=cfg.backend)
    return AuthenticatorState(account_id, kem_pair, sig_pair, ck, seed_root, seed_counter=2)


def _check_account(st: AuthenticatorState, acct: bytes) -> None:
    if acct != st.account_id.encode():
        raise ProtocolError(ErrorCode.ProtocolViolation, "message addressed to another account")


def authenticator_register(st: AuthenticatorState) -> Message:
    if st.phase is not AuthPhase.Idle:
        raise ProtocolError(ErrorCode.WrongPhase, f"register in {st.phase.name}")
    return Message.build(MsgType.REGISTER_INIT, {
        1: st.account_id.encode(), 2: st.kem_pair.public, 3: st.sig_pair.public})


def authenticator_process_ack(st: AuthenticatorState, msg: Message, now: int) -> AuthenticatorState:
    if msg.msg_type is MsgType.ERROR:
        raise parse_error(msg)
    _expect(msg, MsgType.REGISTER_ACK)
    if st.phase is not AuthPhase.Idle:
        raise ProtocolError(ErrorCode.WrongPhase, f"REGISTER_ACK in {st.phase.name}")
    acct, s_pk, validity = _fields(msg, 1, 2, 3)
    _check_account(st, acct)
    if len(validity) != 8:
        raise ProtocolError(ErrorCode.MalformedMessage, "validity must be a u64")
    return replace(st, phase=AuthPhase.Registered, server_kem_pk=s_pk,
                   session_expiry=now + wire.read_uint(validity, 8))


def authenticator_request_add_device(st: AuthenticatorState, now: int,
                                     cfg: ProtocolConfig) -> tuple[AuthenticatorState, Message]:
    if st.phase is not AuthPhase.Registered:
        raise ProtocolError(ErrorCode.WrongPhase, f"add-device in {st.phase.name}")
    if cfg.mutations.check_session_expiry and now >= st.session_expiry:
        raise ProtocolError(ErrorCode.SessionExpired, "root keys expired; log in again")
    return (replace(st, phase=AuthPhase.AwaitOffer),
            Message.build(MsgType.ADD_DEVICE_REQUEST, {1: st.account_id.encode()}))


def authenticator_process_offer(st: AuthenticatorState, msg: Message,
                                cfg: ProtocolConfig) -> tuple[AuthenticatorState, Message]:
    if msg.msg_type is MsgType.ERROR:
        raise parse_error(msg)
    _expect(msg, MsgType.ONBOARD_OFFER)
    if st.phase is not AuthPhase.AwaitOffer:
        raise ProtocolError(ErrorCode.WrongPhase, f"ONBOARD_OFFER in {st.phase.name}")
    acct, body = _fields(msg, 1, 2)
    _check_account(st, acct)
    if cfg.mutations.seal_offer:
        body = _open(cfg, st.kem_pair.secret, body, CTX_OFFER)
    t_n, s_a = _payload(body, 1, 2)

    eph = _draw(st.seed_root, st.seed_counter, b"A-eph")
    enc_tok = crypto.seal(st.server_kem_pk, t_n, CTX_TOKEN, eph, _nonce(st.nonce_counter),
                          backend=cfg.backend).to_bytes()
    sig = crypto.sign(st.sig_pair.secret, enc_tok, backend=cfg.backend)
    inner = wire.encode_fields({1: s_a, 2: st.server_kem_pk, 3: enc_tok, 4: sig})
    if cfg.mutations.protect_provision:
        n = _nonce(st.ck_nonce_counter)
        out = Message.build(MsgType.DEVICE_PROVISION,
                            {1: n, 2: crypto.aead_seal(st.ck, n, inner, CTX_PROVISION)})
    else:
        out = Message.build(MsgType.DEVICE_PROVISION, {2: inner})
    new = replace(st, phase=AuthPhase.OfferForwarded, seed_counter=st.seed_counter + 1,
                  nonce_counter=st.nonce_counter + 1, ck_nonce_counter=st.ck_nonce_counter + 1)
    return new, out


def authenticator_process_notify(st: AuthenticatorState, msg: Message,
                                 cfg: ProtocolConfig) -> AuthenticatorState:
    if msg.msg_type is MsgType.ERROR:
        raise parse_error(msg)
    _expect(msg, MsgType.ONBOARD_NOTIFY)
    if st.phase is not AuthPhase.OfferForwarded:
        raise ProtocolError(ErrorCode.WrongPhase, f"ONBOARD_NOTIFY in {st.phase.name}")
    acct, blob = _fields(msg, 1, 2)
    _check_account(st, acct)
    d_u, status = _payload(_open(cfg, st.kem_pair.secret, blob, CTX_NOTIFY), 1, 2)
    if status != CONNECTED:
        raise ProtocolError(ErrorCode.ProtocolViolation, f"unexpected status {status!r}")
    return replace(st, phase=AuthPhase.Done, connected_device=d_u)


def authenticator_revoke(st: AuthenticatorState, device_uuid: bytes, cfg: ProtocolConfig) -> Message:
    sig = crypto.sign(st.sig_pair.secret, CTX_REVOKE + device_uuid, backend=cfg.backend)
    return Message.build(MsgType.REVOKE_REQUEST, {1: st.account_id.encode(), 2: device_uuid, 3: sig})


# -- Device ----------------------------------------------------------------------------


class DevicePhase(IntEnum):
    Unprovisioned = 0
    Provisioned = 1
    Registered = 2
    Onboarded = 3


@dataclass(frozen=True)
class DeviceState:
    ck: NetworkSessionKey
    seed_root: bytes
    phase: DevicePhase = DevicePhase.Unprovisioned
    server_api: ServerApiAddress | None = None
    server_kem_pk: bytes = b""
    kem_pair: KemKeyPair | None = None
    device_uuid: DeviceUuid | None = None
    long_token: LongLivedToken | None = None
    server_device_pk: bytes = b""
    seed_counter: int = 0
    nonce_counter: int = 0


def device_new(ck: NetworkSessionKey, seed_root: bytes) -> DeviceState:
    return DeviceState(ck, seed_root)


def device_process_provision(st: DeviceState, msg: Message, now: int,
                             cfg: ProtocolConfig) -> tuple[DeviceState, Message]:
    _expect(msg, MsgType.DEVICE_PROVISION)
    if st.phase is not DevicePhase.Unprovisioned:
        raise ProtocolError(ErrorCode.WrongPhase, f"DEVICE_PROVISION in {st.phase.name}")
    if cfg.mutations.protect_provision:
        nonce, ct = _fields(msg, 1, 2)
        try:
            inner = crypto.aead_open(st.ck, nonce, ct, CTX_PROVISION)
        except AuthenticationError as exc:
            raise ProtocolError(ErrorCode.DecryptFail, str(exc)) from None
    else:
        (inner,) = _fields(msg, 2)
    s_a, s_pk, enc_tok, sig = _payload(inner, 1, 2, 3, 4)
    try:
        api = ServerApiAddress.from_bytes(s_a)
    except (wire.DecodeError, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise ProtocolError(ErrorCode.MalformedMessage, f"bad server address: {exc}") from None

    c = st.seed_counter
    kem_pair = crypto.kem_keygen(_draw(st.seed_root, c, b"D-kem"), Role.Device, Role.Server,
                                 cfg.device_key_validity, created_at=now, backend=cfg.backend)
    d_u = st.device_uuid or DeviceUuid.from_seed(_draw(st.seed_root, c + 1, b"D-uuid"))
    eph = _draw(st.seed_root, c + 2, b"D-eph")
    payload = wire.encode_fields({1: kem_pair.public, 2: d_u.value, 3: enc_tok, 4: sig})
    try:
        sealed = crypto.seal(s_pk, payload, CTX_REGISTER, eph, _nonce(st.nonce_counter),
                             backend=cfg.backend)
    except CryptoError as exc:
        raise ProtocolError(ErrorCode.MalformedMessage, f"bad server key: {exc}") from None
    out = Message.build(MsgType.DEVICE_REGISTER, {1: key_id(s_pk), 2: sealed.to_bytes()})
    new = replace(st, phase=DevicePhase.Registered, server_api=api, server_kem_pk=s_pk,
                  kem_pair=kem_pair, device_uuid=d_u, seed_counter=c + 3,
                  nonce_counter=st.nonce_counter + 1)
    return new, out


def device_process_accept(st: DeviceState, msg: Message, cfg: ProtocolConfig) -> DeviceState:
    if msg.msg_type is MsgType.ERROR:
        raise parse_error(msg)
    _expect(msg, MsgType.DEVICE_ACCEPT)
    if st.phase is not DevicePhase.Registered:
        raise ProtocolError(ErrorCode.WrongPhase, f"DEVICE_ACCEPT in {st.phase.name}")
    (blob,) = _fields(msg, 1)
    t_d, s_d_pk = _payload(_open(cfg, st.kem_pair.secret, blob, CTX_ACCEPT), 1, 2)
    try:
        token = LongLivedToken.from_bytes(t_d)
    except wire.DecodeError as exc:
        raise ProtocolError(ErrorCode.MalformedMessage, str(exc)) from None
    return replace(st, phase=DevicePhase.Onboarded, long_token=token, server_device_pk=s_d_pk)


def device_token_use(st: DeviceState, cfg: ProtocolConfig) -> tuple[DeviceState, Message]:
    """Advance the device's copy of the token chain and present it."""
    if st.phase is not DevicePhase.Onboarded:
        raise ProtocolError(ErrorCode.WrongPhase, f"token use in {st.phase.name}")
    token = crypto.chain_next(st.long_token)
    eph = _draw(st.seed_root, st.seed_counter, b"D-eph")
    sealed = crypto.seal(st.server_device_pk, token.to_bytes(), CTX_TOKEN_USE, eph,
                         _nonce(st.nonce_counter), backend=cfg.backend)
    out = Message.build(MsgType.TOKEN_USE, {1: st.device_uuid.value, 2: sealed.to_bytes()})
    return replace(st, long_token=token, seed_counter=st.seed_counter + 1,
                   nonce_counter=st.nonce_counter + 1), out


# -- Server ----------------------------------------------------------------------------


@dataclass(frozen=True)
class ServerSession:
    account_id: str
    a_kem_pk: bytes
    a_sig_pk: bytes
    s_kem_pair: KemKeyPair
    totp_secret: bytes
    issued_token_time: int | None = None
    token_consumed: bool = False

    @property
    def key_expiry(self) -> int:
        return self.s_kem_pair.expires_at

    def live(self, now: int) -> bool:
        return now < self.key_expiry


@dataclass
class ServerSeeds:
    """Mutable seed source for the server; the server is not a pure value
    because it owns the registry anyway."""

    root: bytes
    counter: int = 0

    def next(self, label: bytes) -> bytes:
        seed = _draw(self.root, self.counter, label)
        self.counter += 1
        return seed


def server_register_account(msg: Message, now: int, seeds: ServerSeeds, cfg: ProtocolConfig,
                            existing: ServerSession | None = None) -> tuple[ServerSession, Message]:
    _expect(msg, MsgType.REGISTER_INIT)
    acct, a_kem_pk, a_sig_pk = _fields(msg, 1, 2, 3)
    try:
        account_id = acct.decode()
    except UnicodeDecodeError:
        raise ProtocolError(ErrorCode.MalformedMessage, "account id is not UTF-8") from None
    if existing is not None and existing.live(now):
        raise ProtocolError(ErrorCode.DuplicateSession, account_id)
    s_pair = crypto.kem_keygen(seeds.next(b"S-kem"), Role.Server, Role.Authenticator,
                               cfg.root_key_validity, created_at=now, backend=cfg.backend)
    totp_secret = seeds.next(b"S-totp")[:20]
    session = ServerSession(account_id, a_kem_pk, a_sig_pk, s_pair, totp_secret)
    ack = Message.build(MsgType.REGISTER_ACK, {
        1: acct, 2: s_pair.public, 3: wire.u64(cfg.root_key_validity)})
    return session, ack


def _check_live(session: ServerSession, now: int, cfg: ProtocolConfig) -> None:
    if cfg.mutations.check_session_expiry and not session.live(now):
        raise ProtocolError(ErrorCode.SessionExpired, session.account_id)


def server_handle_add_device(session: ServerSession, now: int, server_api: ServerApiAddress,
                             seeds: ServerSeeds, cfg: ProtocolConfig) -> tuple[ServerSession, Message]:
    _check_live(session, now, cfg)
    t_n = crypto.totp_generate(session.totp_secret, now, cfg.totp_step, cfg.totp_digits, cfg.totp_hash)
    body = wire.encode_fields({1: t_n.encode(), 2: server_api.to_bytes()})
    if cfg.mutations.seal_offer:
        eph = seeds.next(b"S-eph")
        nonce = _nonce(seeds.counter)
        body = crypto.seal(session.a_kem_pk, body, CTX_OFFER, eph, nonce, backend=cfg.backend).to_bytes()
    offer = Message.build(MsgType.ONBOARD_OFFER, {1: session.account_id.encode(), 2: body})
    return replace(session, issued_token_time=now, token_consumed=False), offer


def server_process_device_register(session: ServerSession, registry: Registry, msg: Message,
                                   now: int, seeds: ServerSeeds,
                                   cfg: ProtocolConfig) -> tuple[ServerSession, Message, Message]:
    """Validate a DEVICE_REGISTER and, only if every check passes, insert the
    device. Returns the updated session, DEVICE_ACCEPT and ONBOARD_NOTIFY."""
    _expect(msg, MsgType.DEVICE_REGISTER)
    _check_live(session, now, cfg)
    mut = cfg.mutations
    (blob,) = _fields(msg, 2)
    d_pk, d_u, enc_tok, sig = _payload(_open(cfg, session.s_kem_pair.secret, blob, CTX_REGISTER), 1, 2, 3, 4)
    try:
        device_uuid = DeviceUuid(d_u)
    except ValueError as exc:
        raise ProtocolError(ErrorCode.MalformedMessage, str(exc)) from None

    if mut.check_signature and not crypto.verify(session.a_sig_pk, enc_tok, sig, backend=cfg.backend):
        raise ProtocolError(ErrorCode.BadSignature, "token signature does not verify")
    t_n = _open(cfg, session.s_kem_pair.secret, enc_tok, CTX_TOKEN).decode("ascii", errors="replace")
    if mut.check_totp and not crypto.totp_validate(session.totp_secret, t_n, now, cfg.totp_step,
                                                   cfg.skew_steps, cfg.totp_digits, cfg.totp_hash):
        raise ProtocolError(ErrorCode.TokenExpired, "transient token outside validity window")
    if session.issued_token_time is None:
        raise ProtocolError(ErrorCode.TokenExpired, "no token issued for this session")
    if mut.single_use_token and session.token_consumed:
        raise ProtocolError(ErrorCode.TokenReplayed, "transient token already used")
    if device_uuid.value in registry:
        raise ProtocolError(ErrorCode.DuplicateDevice, str(device_uuid))

    s_d_pair = crypto.kem_keygen(seeds.next(b"S-dev-kem"), Role.Server, Role.Device,
                                 cfg.device_key_validity, created_at=now, backend=cfg.backend)
    t_d = LongLivedToken(seeds.next(b"S-td"), 0, seeds.next(b"S-td-chain"))
    try:
        accept_ct = crypto.seal(d_pk, wire.encode_fields({1: t_d.to_bytes(), 2: s_d_pair.public}),
                                CTX_ACCEPT, seeds.next(b"S-eph"), _nonce(seeds.counter), backend=cfg.backend)
    except CryptoError:
        raise ProtocolError(ErrorCode.MalformedMessage, "device public key unusable") from None
    registry.insert(DeviceRecord(device_uuid.value, d_pk, s_d_pair, t_d, onboarded_at=now,
                                 account_id=session.account_id, owner_sig_pk=session.a_sig_pk))
    notify_ct = crypto.seal(session.a_kem_pk, wire.encode_fields({1: device_uuid.value, 2: CONNECTED}),
                            CTX_NOTIFY, seeds.next(b"S-eph"), _nonce(seeds.counter), backend=cfg.backend)
    accept = Message.build(MsgType.DEVICE_ACCEPT, {1: accept_ct.to_bytes()})
    notify = Message.build(MsgType.ONBOARD_NOTIFY, {1: session.account_id.encode(), 2: notify_ct.to_bytes()})
    return replace(session, token_consumed=True), accept, notify


def server_handle_token_use(registry: Registry, msg: Message, cfg: ProtocolConfig) -> Message:
    _expect(msg, MsgType.TOKEN_USE)
    d_u, blob = _fields(msg, 1, 2)
    rec = registry.lookup(d_u)
    if rec.status is Status.Revoked and registry.enforce_revocation:
        raise ProtocolError(ErrorCode.RevokedDevice, d_u.hex())
    presented = _open(cfg, rec.s_d_pair.secret, blob, CTX_TOKEN_USE)
    expected = crypto.chain_next(rec.t_d_head)
    if not hmac.compare_digest(presented, expected.to_bytes()):
        raise ProtocolError(ErrorCode.BadToken, "token does not match chain head")
    registry.advance_token(d_u)
    return Message.build(MsgType.ACK, {1: b"ok", 2: wire.u64(expected.counter)})


def server_handle_revoke(registry: Registry, msg: Message, cfg: ProtocolConfig) -> Message:
    _expect(msg, MsgType.REVOKE_REQUEST)
    acct, d_u, sig = _fields(msg, 1, 2, 3)
    rec = registry.lookup(d_u)
    if rec.account_id.encode() != acct or not crypto.verify(rec.owner_sig_pk, CTX_REVOKE + d_u, sig,
                                                            backend=cfg.backend):
        raise ProtocolError(ErrorCode.Unauthorized, "revocation not signed by the owning account")
    registry.revoke(d_u)
    return Message.build(MsgType.ACK, {1: b"revoked"})


class ServerNode:
    """Server-side dispatcher holding account sessions and the registry.

    One lock serializes every handler, which is what lets the TCP daemon
    share a node between connection threads.
    """

    def __init__(self, cfg: ProtocolConfig, seeds: ServerSeeds, server_api: ServerApiAddress,
                 registry: Registry | None = None) -> None:
        self.cfg = cfg
        self.seeds = seeds
        self.server_api = server_api
        self.registry = registry if registry is not None else Registry(
            enforce_revocation=cfg.mutations.check_revocation)
        self.sessions: dict[str, ServerSession] = {}
        self.lock = threading.RLock()

    def _session_for_key(self, kid: bytes) -> ServerSession:
        for session in self.sessions.values():
            if hmac.compare_digest(key_id(session.s_kem_pair.public), kid):
                return session
        raise ProtocolError(ErrorCode.NoSession, "no session holds the addressed key")

    def _account(self, raw: bytes) -> str:
        try:
            return raw.decode()
        except UnicodeDecodeError:
            raise ProtocolError(ErrorCode.MalformedMessage, "account id is not UTF-8") from None

    def handle(self, msg: Message, now: int) -> tuple[Message | None, tuple[str, Message] | None]:
        """Process one inbound message.

        Returns ``(reply, notify)``: the reply goes back to the sender, the
        notification (if any) is ``(account_id, message)`` for that
        account's authenticator.
        """
        with self.lock:
            t = msg.msg_type
            if t is MsgType.REGISTER_INIT:
                (acct,) = _fields(msg, 1)
                account = self._account(acct)
                session, ack = server_register_account(msg, now, self.seeds, self.cfg,
                                                       self.sessions.get(account))
                self.sessions[account] = session
                return ack, None
            if t is MsgType.ADD_DEVICE_REQUEST:
                (acct,) = _fields(msg, 1)
                account = self._account(acct)
                if account not in self.sessions:
                    raise ProtocolError(ErrorCode.NoSession, account)
                session, offer = server_handle_add_device(self.sessions[account], now, self.server_api,
                                                          self.seeds, self.cfg)
                self.sessions[account] = session
                return offer, None
            if t is MsgType.DEVICE_REGISTER:
                (kid,) = _fields(msg, 1)
                session = self._session_for_key(kid)
                session, accept, notify = server_process_device_register(
                    session, self.registry, msg, now, self.seeds, self.cfg)
                self.sessions[session.account_id] = session
                return accept, (session.account_id, notify)
            if t is MsgType.TOKEN_USE:
                return server_handle_token_use(self.registry, msg, self.cfg), None
            if t is MsgType.REVOKE_REQUEST:
                return server_handle_revoke(self.registry, msg, self.cfg), None
            raise ProtocolError(ErrorCode.ProtocolViolation, f"server does not accept {t.name}")
