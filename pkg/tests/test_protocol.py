import random
from dataclasses import replace

import pytest

from asop import crypto, protocol, wire
from asop.crypto import HybridCiphertext, NetworkSessionKey
from asop.errors import ErrorCode, ProtocolError
from asop.protocol import AuthPhase, DevicePhase, DeviceUuid
from asop.wire import Message, MsgType

from conftest import API, T0, Flow, seed


def code_of(excinfo):
    return excinfo.value.code


def reseal_register(flow, reg, edit):
    """Rebuild a DEVICE_REGISTER with its sealed payload modified by ``edit``."""
    s_sk = flow.session.s_kem_pair.secret
    inner = dict(wire.decode_fields(crypto.open_sealed(s_sk, HybridCiphertext.from_bytes(reg[2]), protocol.CTX_REGISTER)))
    inner = edit(inner)
    ct = crypto.seal(flow.session.s_kem_pair.public, wire.encode_fields(inner), protocol.CTX_REGISTER,
                     seed("adv-eph"), bytes(12))
    return Message.build(MsgType.DEVICE_REGISTER, {1: reg[1], 2: ct.to_bytes()})


# -- registration --------------------------------------------------------------------


def test_register_then_add_device(flow):
    ack = flow.register()
    assert flow.auth.phase is AuthPhase.Registered
    assert ack[2] == flow.session.s_kem_pair.public
    assert wire.read_uint(ack[3], 8) == 24 * 3600
    assert flow.offer().msg_type is MsgType.ONBOARD_OFFER
    assert flow.auth.phase is AuthPhase.AwaitOffer


def test_duplicate_registration_rejected_until_expiry(flow):
    flow.register()
    init = protocol.authenticator_register(replace(flow.auth, phase=AuthPhase.Idle))
    with pytest.raises(ProtocolError) as e:
        protocol.server_register_account(init, T0 + 10, flow.seeds, flow.cfg, flow.session)
    assert code_of(e) is ErrorCode.DuplicateSession
    later = T0 + 24 * 3600
    session, _ = protocol.server_register_account(init, later, flow.seeds, flow.cfg, flow.session)
    assert session.key_expiry == later + 24 * 3600


def test_expired_session_requires_relogin(flow):
    flow.register()
    flow.now = T0 + 24 * 3600 + 1
    with pytest.raises(ProtocolError) as e:
        protocol.authenticator_request_add_device(flow.auth, flow.now, flow.cfg)
    assert code_of(e) is ErrorCode.SessionExpired
    with pytest.raises(ProtocolError) as e:
        protocol.server_handle_add_device(flow.session, flow.now, API, flow.seeds, flow.cfg)
    assert code_of(e) is ErrorCode.SessionExpired
    # log in again with new root keys
    flow.auth = protocol.authenticator_new("alice", flow.ck, seed("auth2"), flow.cfg, flow.now)
    init = protocol.authenticator_register(flow.auth)
    flow.session, ack = protocol.server_register_account(init, flow.now, flow.seeds, flow.cfg, flow.session)
    flow.auth = protocol.authenticator_process_ack(flow.auth, ack, flow.now)
    assert flow.offer().msg_type is MsgType.ONBOARD_OFFER


# -- offer ---------------------------------------------------------------------------


def test_offer_opens_to_token_and_address(flow):
    flow.register()
    offer = flow.offer()
    body = crypto.open_sealed(flow.auth.kem_pair.secret, HybridCiphertext.from_bytes(offer[2]), protocol.CTX_OFFER)
    f = dict(wire.decode_fields(body))
    t_n = f[1].decode()
    assert len(t_n) == 8 and t_n.isdigit()
    assert protocol.ServerApiAddress.from_bytes(f[2]) == API
    assert t_n == crypto.totp_generate(flow.session.totp_secret, T0)
    assert crypto.totp_validate(flow.session.totp_secret, t_n, T0 + 29)
    assert flow.session.issued_token_time == T0 and not flow.session.token_consumed


def test_eavesdropper_cannot_open_offer(flow):
    flow.register()
    offer = flow.offer()
    eve = crypto.kem_keygen(seed("eve"), crypto.Role.Authenticator, crypto.Role.Server)
    with pytest.raises(crypto.AuthenticationError):
        crypto.open_sealed(eve.secret, HybridCiphertext.from_bytes(offer[2]), protocol.CTX_OFFER)


def test_offer_for_other_account_rejected(flow):
    flow.register()
    offer = flow.offer()
    forged = Message.build(MsgType.ONBOARD_OFFER, {1: b"mallory", 2: offer[2]})
    with pytest.raises(ProtocolError) as e:
        protocol.authenticator_process_offer(flow.auth, forged, flow.cfg)
    assert code_of(e) is ErrorCode.ProtocolViolation


# -- provision -----------------------------------------------------------------------


def test_provision_readable_only_with_ck(flow):
    flow.register()
    prov = flow.provision()
    assert flow.auth.phase is AuthPhase.OfferForwarded
    inner = dict(wire.decode_fields(crypto.aead_open(flow.ck, prov[1], prov[2], protocol.CTX_PROVISION)))
    assert protocol.ServerApiAddress.from_bytes(inner[1]) == API
    assert inner[2] == flow.session.s_kem_pair.public
    assert crypto.verify(flow.auth.sig_pair.public, inner[3], inner[4])

    stranger = protocol.device_new(NetworkSessionKey(seed("other ck")), seed("device"))
    with pytest.raises(ProtocolError) as e:
        protocol.device_process_provision(stranger, prov, T0, flow.cfg)
    assert code_of(e) is ErrorCode.DecryptFail


def test_enc_tok_is_sealed_token_signed_after_encryption(flow):
    flow.register()
    offer = flow.offer()
    prov = flow.provision(offer)
    inner = dict(wire.decode_fields(crypto.aead_open(flow.ck, prov[1], prov[2], protocol.CTX_PROVISION)))
    t_n = crypto.open_sealed(flow.session.s_kem_pair.secret, HybridCiphertext.from_bytes(inner[3]), protocol.CTX_TOKEN)
    assert t_n.decode() == crypto.totp_generate(flow.session.totp_secret, T0)


def test_offer_in_wrong_phase(flow):
    flow.register()
    offer = flow.offer()
    flow.provision(offer)
    with pytest.raises(ProtocolError) as e:
        protocol.authenticator_process_offer(flow.auth, offer, flow.cfg)
    assert code_of(e) is ErrorCode.WrongPhase


# -- device register -----------------------------------------------------------------


def test_device_uuid_layout_and_determinism(flow):
    flow.register()
    prov = flow.provision()
    d1, reg1 = protocol.device_process_provision(flow.device, prov, T0, flow.cfg)
    d2, reg2 = protocol.device_process_provision(flow.device, prov, T0, flow.cfg)
    assert d1.device_uuid == d2.device_uuid and reg1 == reg2
    u = d1.device_uuid.value
    assert u[6] >> 4 == 4 and u[8] >> 6 == 0b10
    assert d1.phase is DevicePhase.Registered
    with pytest.raises(ProtocolError) as e:
        protocol.device_process_provision(d1, prov, T0, flow.cfg)
    assert code_of(e) is ErrorCode.WrongPhase


def test_device_uuid_rejects_non_v4():
    with pytest.raises(ValueError):
        DeviceUuid(bytes(16))


def test_honest_registration_populates_registry(flow):
    flow.full()
    d_u = flow.device.device_uuid.value
    rec = flow.registry.lookup(d_u)
    assert rec.d_s_pk == flow.device.kem_pair.public
    assert rec.account_id == "alice"
    assert flow.session.token_consumed


def test_replayed_register_rejected(flow):
    flow.register()
    reg = flow.device_register()
    flow.server_register(reg)
    before = flow.registry.records()
    with pytest.raises(ProtocolError) as e:
        flow.server_register(reg)
    assert code_of(e) is ErrorCode.TokenReplayed
    assert flow.registry.records() == before and flow.registry.insert_count == 1


@pytest.mark.parametrize("delay,accepted", [(0, True), (29, True), (59, True), (60, False), (61, False)])
def test_token_expiry_boundaries(delay, accepted):
    # Issued at a step boundary: same counter through +29 s, next counter
    # (inside the one-step skew) through +59 s, two counters away from +60 s.
    flow = Flow()
    flow.register()
    reg = flow.device_register()
    flow.now = T0 + delay
    if accepted:
        flow.server_register(reg)
        assert len(flow.registry) == 1
    else:
        with pytest.raises(ProtocolError) as e:
            flow.server_register(reg)
        assert code_of(e) is ErrorCode.TokenExpired
        assert len(flow.registry) == 0


def test_late_issuance_still_expires_by_61s():
    flow = Flow(now=T0 + 29)
    flow.register()
    reg = flow.device_register()
    flow.now = T0 + 29 + 61
    with pytest.raises(ProtocolError) as e:
        flow.server_register(reg)
    assert code_of(e) is ErrorCode.TokenExpired


def test_signature_bitflips_give_bad_signature(flow):
    flow.register()
    reg = flow.device_register()
    rng = random.Random(11)
    for _ in range(100):
        def flip(inner):
            sig = bytearray(inner[4])
            i = rng.randrange(len(sig) * 8)
            sig[i // 8] ^= 1 << (i % 8)
            return {**inner, 4: bytes(sig)}
        with pytest.raises(ProtocolError) as e:
            flow.server_register(reseal_register(flow, reg, flip))
        assert code_of(e) is ErrorCode.BadSignature
    assert len(flow.registry) == 0 and not flow.session.token_consumed


def test_tampered_enc_tok_gives_bad_signature(flow):
    flow.register()
    reg = flow.device_register()
    bad = reseal_register(flow, reg, lambda inner: {**inner, 3: inner[3][:-1] + bytes([inner[3][-1] ^ 1])})
    with pytest.raises(ProtocolError) as e:
        flow.server_register(bad)
    assert code_of(e) is ErrorCode.BadSignature


def test_register_decrypt_fail_and_no_mutation(flow):
    flow.register()
    reg = flow.device_register()
    blob = bytearray(reg[2])
    blob[-1] ^= 0x80
    with pytest.raises(ProtocolError) as e:
        flow.server_register(Message.build(MsgType.DEVICE_REGISTER, {1: reg[1], 2: bytes(blob)}))
    assert code_of(e) is ErrorCode.DecryptFail
    assert len(flow.registry) == 0 and not flow.session.token_consumed


def test_duplicate_device(flow):
    flow.full()
    # a second session whose device reuses the same UUID
    other = Flow()
    other.registry = flow.registry
    other.register()
    reg = other.device_register()
    with pytest.raises(ProtocolError) as e:
        other.server_register(reg)
    assert code_of(e) is ErrorCode.DuplicateDevice
    assert len(flow.registry) == 1


def test_register_after_session_expiry(flow):
    flow.register()
    reg = flow.device_register()
    flow.now = T0 + 24 * 3600
    with pytest.raises(ProtocolError) as e:
        flow.server_register(reg)
    assert code_of(e) is ErrorCode.SessionExpired


# -- accept and notify ---------------------------------------------------------------


def test_accept_gives_device_the_stored_credentials(flow):
    flow.full()
    rec = flow.registry.lookup(flow.device.device_uuid.value)
    assert flow.device.phase is DevicePhase.Onboarded
    assert flow.device.long_token == rec.t_d_head
    assert flow.device.server_device_pk == rec.s_d_pair.public


def test_accept_for_other_device_fails(flow):
    flow.register()
    reg = flow.device_register()
    accept, _ = flow.server_register(reg)
    other_flow = Flow()
    other_flow.register()
    other_flow.device_register()
    with pytest.raises(ProtocolError) as e:
        protocol.device_process_accept(replace(other_flow.device, kem_pair=crypto.kem_keygen(
            seed("x"), crypto.Role.Device, crypto.Role.Server)), accept, flow.cfg)
    assert code_of(e) is ErrorCode.DecryptFail


def test_double_accept_is_wrong_phase(flow):
    flow.register()
    accept, _ = flow.server_register(flow.device_register())
    onboarded = protocol.device_process_accept(flow.device, accept, flow.cfg)
    with pytest.raises(ProtocolError) as e:
        protocol.device_process_accept(onboarded, accept, flow.cfg)
    assert code_of(e) is ErrorCode.WrongPhase


def test_notify_completes_authenticator(flow):
    flow.full()
    assert flow.auth.phase is AuthPhase.Done
    assert flow.auth.connected_device == flow.device.device_uuid.value


def test_notify_before_forwarding_is_wrong_phase(flow):
    flow.register()
    offer = flow.offer()
    awaiting = flow.auth
    _, notify = flow.server_register(flow.device_register(flow.provision(offer)))
    with pytest.raises(ProtocolError) as e:
        protocol.authenticator_process_notify(awaiting, notify, flow.cfg)
    assert code_of(e) is ErrorCode.WrongPhase


def test_notify_with_wrong_status_is_violation(flow):
    flow.register()
    flow.server_register(flow.device_register())
    ct = crypto.seal(flow.auth.kem_pair.public, wire.encode_fields({1: flow.device.device_uuid.value, 2: b"offline"}),
                     protocol.CTX_NOTIFY, seed("e"), bytes(12))
    bad = Message.build(MsgType.ONBOARD_NOTIFY, {1: b"alice", 2: ct.to_bytes()})
    with pytest.raises(ProtocolError) as e:
        protocol.authenticator_process_notify(flow.auth, bad, flow.cfg)
    assert code_of(e) is ErrorCode.ProtocolViolation


def test_error_frames_surface_as_protocol_errors(flow):
    err = protocol.error_message(ErrorCode.SessionExpired, "log in")
    assert protocol.parse_error(err).code is ErrorCode.SessionExpired
    with pytest.raises(ProtocolError) as e:
        protocol.authenticator_process_ack(flow.auth, err, T0)
    assert code_of(e) is ErrorCode.SessionExpired


# -- properties ----------------------------------------------------------------------


def test_failed_messages_leave_state_untouched(flow):
    flow.register()
    offer = flow.offer()
    auth_before = flow.auth
    bad_offer = Message.build(MsgType.ONBOARD_OFFER, {1: b"alice", 2: offer[2][:-1] + b"\x00"})
    with pytest.raises(ProtocolError):
        protocol.authenticator_process_offer(flow.auth, bad_offer, flow.cfg)
    assert flow.auth == auth_before
    prov = flow.provision(offer)
    dev_before = flow.device
    with pytest.raises(ProtocolError):
        protocol.device_process_provision(flow.device, Message.build(MsgType.DEVICE_PROVISION, {1: prov[1], 2: prov[2][::-1]}), T0, flow.cfg)
    assert flow.device == dev_before


def test_phases_monotone_over_full_run():
    flow = Flow()
    auth_phases = [flow.auth.phase]
    dev_phases = [flow.device.phase]
    flow.register(); auth_phases.append(flow.auth.phase)
    offer = flow.offer(); auth_phases.append(flow.auth.phase)
    prov = flow.provision(offer); auth_phases.append(flow.auth.phase)
    reg = flow.device_register(prov); dev_phases.append(flow.device.phase)
    accept, notify = flow.server_register(reg)
    flow.device = protocol.device_process_accept(flow.device, accept, flow.cfg); dev_phases.append(flow.device.phase)
    flow.auth = protocol.authenticator_process_notify(flow.auth, notify, flow.cfg); auth_phases.append(flow.auth.phase)
    assert auth_phases == sorted(auth_phases) and auth_phases[-1] is AuthPhase.Done
    assert dev_phases == sorted(dev_phases) and dev_phases[-1] is DevicePhase.Onboarded


def test_full_flow_deterministic():
    a, b = Flow().full(), Flow().full()
    assert a.device == b.device and a.registry == b.registry


def test_device_key_reuse_finding(flow):
    # DEVICE_REGISTER is sealed to the server key issued for the authenticator.
    flow.register()
    reg = flow.device_register()
    assert reg[1] == protocol.key_id(flow.session.s_kem_pair.public)
    assert flow.device.server_kem_pk == flow.auth.server_kem_pk


def test_token_use_and_revoke(flow):
    flow.full()
    d_u = flow.device.device_uuid.value
    flow.device, use = protocol.device_token_use(flow.device, flow.cfg)
    ack = protocol.server_handle_token_use(flow.registry, use, flow.cfg)
    assert wire.read_uint(ack[2], 8) == 1
    assert flow.registry.lookup(d_u).t_d_head == flow.device.long_token
    # replaying the same token is stale now
    with pytest.raises(ProtocolError) as e:
        protocol.server_handle_token_use(flow.registry, use, flow.cfg)
    assert code_of(e) is ErrorCode.BadToken
    forged = protocol.authenticator_revoke(replace(flow.auth, sig_pair=crypto.sig_keygen(seed("m"), crypto.Role.Authenticator)), d_u, flow.cfg)
    with pytest.raises(ProtocolError) as e:
        protocol.server_handle_revoke(flow.registry, forged, flow.cfg)
    assert code_of(e) is ErrorCode.Unauthorized
    protocol.server_handle_revoke(flow.registry, protocol.authenticator_revoke(flow.auth, d_u, flow.cfg), flow.cfg)
    flow.device, use = protocol.device_token_use(flow.device, flow.cfg)
    with pytest.raises(ProtocolError) as e:
        protocol.server_handle_token_use(flow.registry, use, flow.cfg)
    assert code_of(e) is ErrorCode.RevokedDevice
