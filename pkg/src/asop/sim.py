"""In-memory network for the three protocol roles, driven by a virtual clock.

Every frame a role emits goes through an adversary before delivery. The
adversary sees each frame and answers with a list of actions (deliver,
drop, delay, replay, flip a bit, inject, redirect); it can read, store and
rewrite frames but not break the primitives. Each delivery is appended to
the transcript together with the recipient's outcome.

The scenario catalog at the bottom pairs each attack with a safety
predicate and a mutation twin: the same scenario against a build with one
defense switched off, which must flip the verdict.
"""

from __future__ import annotations

import json
import random
from collections import deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Union

from . import crypto, protocol, wire
from .crypto import NetworkSessionKey
from .errors import AsopError, ErrorCode, ProtocolError
from .protocol import Mutations, ProtocolConfig, ServerApiAddress
from .wire import Message, MsgType

ACCEPTED = "Accepted"
SERVER, AUTHENTICATOR, DEVICE, ADVERSARY = "server", "authenticator", "device", "adversary"


class VirtualClock:
    def __init__(self, now: int = 0) -> None:
        self.now = now

    def advance(self, seconds: int) -> None:
        if seconds < 0:
            raise ValueError("virtual clock cannot go backwards")
        self.now += seconds


# -- adversary actions --


@dataclass(frozen=True)
class Deliver:
    pass


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Delay:
    seconds: int


@dataclass(frozen=True)
class Replay:
    index: int
    delay: int = 0


@dataclass(frozen=True)
class FlipBit:
    offset: int
    bit: int


@dataclass(frozen=True)
class Inject:
    raw: bytes
    recipient: str | None = None


@dataclass(frozen=True)
class Redirect:
    recipient: str


AdversaryAction = Union[Deliver, Drop, Delay, Replay, FlipBit, Inject, Redirect]


@dataclass(frozen=True)
class Pending:
    sender: str
    recipient: str
    frame: bytes
    index: int


class Adversary:
    """Passive by default: delivers everything unchanged."""

    def on_frame(self, sim: "Simulation", p: Pending) -> list[AdversaryAction]:
        return [Deliver()]

    def on_idle(self, sim: "Simulation") -> list[AdversaryAction]:
        return []


# -- transcript --


@dataclass(frozen=True)
class TranscriptEntry:
    time: int
    sender: str
    recipient: str
    frame: bytes
    outcome: str

    @property
    def msg_type(self) -> MsgType | None:
        return wire.peek_type(self.frame)

    def to_json(self) -> dict:
        t = self.msg_type
        return {"t": self.time, "from": self.sender, "to": self.recipient,
                "type": t.name if t else None, "outcome": self.outcome,
                "frame_hex": self.frame.hex()}


@dataclass
class Transcript:
    entries: list[TranscriptEntry] = field(default_factory=list)

    def append(self, entry: TranscriptEntry) -> None:
        self.entries.append(entry)

    def __len__(self) -> int:
        return len(self.entries)

    def __iter__(self):
        return iter(self.entries)

    def frames(self) -> list[bytes]:
        return [e.frame for e in self.entries]

    def of_type(self, t: MsgType) -> list[TranscriptEntry]:
        return [e for e in self.entries if e.msg_type is t]

    def to_jsonl(self) -> str:
        return "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in self.entries)

    def write(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_jsonl())

    @classmethod
    def from_jsonl(cls, text: str) -> "Transcript":
        entries = []
        for line in text.splitlines():
            if line.strip():
                d = json.loads(line)
                entries.append(TranscriptEntry(d["t"], d["from"], d["to"], bytes.fromhex(d["frame_hex"]),
                                               d["outcome"]))
        return cls(entries)


# -- simulation --


def _seed(label: str) -> bytes:
    return crypto._sha256(b"asop-sim-seed", label.encode())


@dataclass(frozen=True)
class SimConfig:
    server_seed: bytes = _seed("server")
    authenticator_seed: bytes = _seed("authenticator")
    device_seed: bytes = _seed("device")
    ck: bytes = _seed("ck")
    device_ck: bytes | None = None  # defaults to ck
    account_id: str = "alice"
    start_time: int = 1_500_000_000  # a multiple of the 30 s step
    validity: int = crypto.ROOT_KEY_VALIDITY
    step: int = 30
    backend: str = "toy"
    server_api: ServerApiAddress = ServerApiAddress("127.0.0.1", 7373, "/asop/v1")
    mutations: Mutations = Mutations()
    scenario_seed: int = 0

    def protocol_config(self) -> ProtocolConfig:
        return ProtocolConfig(backend=crypto.get_backend(self.backend), root_key_validity=self.validity,
                              totp_step=self.step, mutations=self.mutations)


@dataclass
class Event:
    time: int
    entity: str
    code: str
    detail: str = ""


class Simulation:
    def __init__(self, config: SimConfig = SimConfig(), adversary: Adversary | None = None) -> None:
        self.config = config
        self.cfg = config.protocol_config()
        self.clock = VirtualClock(config.start_time)
        self.adversary = adversary or Adversary()
        self.transcript = Transcript()
        self.captured: list[Pending] = []
        self.events: list[Event] = []
        self.queue: deque[Pending] = deque()
        self.server = protocol.ServerNode(self.cfg, protocol.ServerSeeds(config.server_seed), config.server_api)
        self.authenticator = protocol.authenticator_new(
            config.account_id, NetworkSessionKey(config.ck), config.authenticator_seed, self.cfg,
            now=self.clock.now)
        self.device = protocol.device_new(NetworkSessionKey(config.device_ck or config.ck), config.device_seed)
        self.account_owner = {}

    @property
    def registry(self):
        return self.server.registry

    @property
    def now(self) -> int:
        return self.clock.now

    # -- sending and delivery --

    def send(self, sender: str, recipient: str, msg: Message | bytes) -> None:
        frame = msg if isinstance(msg, bytes) else wire.encode(msg)
        p = Pending(sender, recipient, frame, len(self.captured))
        self.captured.append(p)
        self.queue.append(p)

    def _apply(self, p: Pending | None, actions: list[AdversaryAction]) -> None:
        for a in actions:
            if isinstance(a, Deliver):
                self.deliver(p.sender, p.recipient, p.frame)
            elif isinstance(a, Drop):
                pass
            elif isinstance(a, Delay):
                self.clock.advance(a.seconds)
                self.deliver(p.sender, p.recipient, p.frame)
            elif isinstance(a, Replay):
                old = self.captured[a.index]
                self.clock.advance(a.delay)
                self.deliver(old.sender, old.recipient, old.frame)
            elif isinstance(a, FlipBit):
                frame = bytearray(p.frame)
                frame[a.offset] ^= 1 << a.bit
                self.deliver(p.sender, p.recipient, bytes(frame))
            elif isinstance(a, Inject):
                target = a.recipient or (p.recipient if p else SERVER)
                self.deliver(ADVERSARY if p is None else p.sender, target, a.raw)
            elif isinstance(a, Redirect):
                self.deliver(p.sender, a.recipient, p.frame)
            else:
                raise TypeError(f"unknown adversary action {a!r}")

    def run(self) -> None:
        while True:
            while self.queue:
                p = self.queue.popleft()
                self._apply(p, self.adversary.on_frame(self, p))
            idle = self.adversary.on_idle(self)
            if not idle:
                return
            self._apply(None, idle)

    def deliver(self, sender: str, recipient: str, frame: bytes) -> str:
        handler = {SERVER: self._at_server, AUTHENTICATOR: self._at_authenticator,
                   DEVICE: self._at_device}.get(recipient)
        try:
            if handler is None:
                outcome = ACCEPTED  # adversary or unknown sink just records
            else:
                handler(sender, wire.decode(frame))
                outcome = ACCEPTED
        except wire.DecodeError as exc:
            outcome = ErrorCode.MalformedMessage.name
            self._event(recipient, outcome, f"{type(exc).__name__}: {exc}")
        except ProtocolError as exc:
            outcome = exc.code.name
            self._event(recipient, outcome, exc.detail)
        self.transcript.append(TranscriptEntry(self.clock.now, sender, recipient, frame, outcome))
        return outcome

    def _event(self, entity: str, code: str, detail: str = "") -> None:
        self.events.append(Event(self.clock.now, entity, code, detail))

    def _at_server(self, sender: str, msg: Message) -> None:
        reply, notify = self.server.handle(msg, self.clock.now)
        if msg.msg_type is MsgType.REGISTER_INIT:
            self.account_owner[msg[1].decode()] = sender
        if reply is not None:
            self.send(SERVER, sender, reply)
        if notify is not None:
            account, note = notify
            self.send(SERVER, self.account_owner.get(account, AUTHENTICATOR), note)

    def _at_authenticator(self, sender: str, msg: Message) -> None:
        st = self.authenticator
        if msg.msg_type is MsgType.REGISTER_ACK or (msg.msg_type is MsgType.ERROR and st.phase is protocol.AuthPhase.Idle):
            self.authenticator = protocol.authenticator_process_ack(st, msg, self.clock.now)
        elif msg.msg_type is MsgType.ONBOARD_OFFER:
            self.authenticator, out = protocol.authenticator_process_offer(st, msg, self.cfg)
            self.send(AUTHENTICATOR, DEVICE, out)
        elif msg.msg_type is MsgType.ONBOARD_NOTIFY:
            self.authenticator = protocol.authenticator_process_notify(st, msg, self.cfg)
        elif msg.msg_type is MsgType.ERROR:
            raise protocol.parse_error(msg)
        else:
            raise ProtocolError(ErrorCode.ProtocolViolation, f"authenticator does not accept {msg.msg_type.name}")

    def _at_device(self, sender: str, msg: Message) -> None:
        st = self.device
        if msg.msg_type is MsgType.DEVICE_PROVISION:
            self.device, out = protocol.device_process_provision(st, msg, self.clock.now, self.cfg)
            self.send(DEVICE, SERVER, out)
        elif msg.msg_type is MsgType.DEVICE_ACCEPT:
            self.device = protocol.device_process_accept(st, msg, self.cfg)
        elif msg.msg_type is MsgType.ACK:
            pass
        else:
            raise ProtocolError(ErrorCode.ProtocolViolation, f"device does not accept {msg.msg_type.name}")

    # -- user driver --

    def user_register(self) -> None:
        self.send(AUTHENTICATOR, SERVER, protocol.authenticator_register(self.authenticator))

    def user_add_device(self) -> bool:
        try:
            self.authenticator, msg = protocol.authenticator_request_add_device(
                self.authenticator, self.clock.now, self.cfg)
        except ProtocolError as exc:
            self._event(AUTHENTICATOR, exc.code.name, exc.detail)
            return False
        self.send(AUTHENTICATOR, SERVER, msg)
        return True

    def user_relogin(self, seed: bytes) -> None:
        """Fresh authenticator keys after expiry; keeps the same C_K."""
        self.authenticator = protocol.authenticator_new(
            self.config.account_id, self.authenticator.ck, seed, self.cfg, now=self.clock.now)
        self.user_register()

    def device_use_token(self) -> None:
        self.device, msg = protocol.device_token_use(self.device, self.cfg)
        self.send(DEVICE, SERVER, msg)

    def onboard(self) -> None:
        self.user_register()
        self.run()
        if self.user_add_device():
            self.run()

    # -- checks --

    def terminal(self) -> bool:
        session = self.server.sessions.get(self.config.account_id)
        return (self.authenticator.phase is protocol.AuthPhase.Done
                and self.device.phase is protocol.DevicePhase.Onboarded
                and session is not None and session.token_consumed)

    def agreement(self) -> bool:
        """Device and registry hold byte-identical T_D and S^D_p."""
        d = self.device
        if d.device_uuid is None or d.device_uuid.value not in self.registry:
            return False
        rec = self.registry.lookup(d.device_uuid.value)
        return d.long_token == rec.t_d_head and d.server_device_pk == rec.s_d_pair.public

    def accepted_registers(self) -> int:
        return sum(1 for e in self.transcript.of_type(MsgType.DEVICE_REGISTER)
                   if e.recipient == SERVER and e.outcome == ACCEPTED)


def run_happy_path(config: SimConfig = SimConfig()) -> Transcript:
    sim = Simulation(config)
    sim.onboard()
    return sim.transcript


# -- scenarios --


class Verdict(str, Enum):
    DefenseHeld = "DefenseHeld"
    DefenseBreached = "DefenseBreached"


class UnknownScenario(AsopError, KeyError):
    pass


class _OnType(Adversary):
    """Runs ``act`` on the first frame of type ``t``; delivers everything else."""

    def __init__(self, t: MsgType, act: Callable[["Simulation", Pending], list[AdversaryAction]]) -> None:
        self.t, self.act, self.fired = t, act, False

    def on_frame(self, sim, p):
        if not self.fired and wire.peek_type(p.frame) is self.t:
            self.fired = True
            return self.act(sim, p)
        return [Deliver()]


class ReplayAdversary(Adversary):
    """Replays the first DEVICE_REGISTER according to a plan of
    ``(frames_to_wait, delay_seconds)`` pairs."""

    def __init__(self, plan: list[tuple[int, int]]) -> None:
        self.plan = list(plan)
        self.register_index: int | None = None
        self.waiting: list[list[int]] = []

    def _due(self) -> list[AdversaryAction]:
        actions, keep = [], []
        for item in self.waiting:
            if item[0] <= 0:
                actions.append(Replay(self.register_index, item[1]))
            else:
                keep.append(item)
        self.waiting = keep
        return actions

    def on_frame(self, sim, p):
        actions: list[AdversaryAction] = [Deliver()]
        if self.register_index is None and wire.peek_type(p.frame) is MsgType.DEVICE_REGISTER:
            self.register_index = p.index
            self.waiting = [[wait, delay] for wait, delay in self.plan]
        else:
            for item in self.waiting:
                item[0] -= 1
        return actions + self._due()

    def on_idle(self, sim):
        for item in self.waiting:
            item[0] = 0
        return self._due()


class BitFlipAdversary(Adversary):
    """Flips one random bit in the first frame of type ``t``."""

    def __init__(self, t: MsgType, rng: random.Random) -> None:
        self.t, self.rng = t, rng
        self.flipped_at: int | None = None

    def on_frame(self, sim, p):
        if self.flipped_at is None and wire.peek_type(p.frame) is self.t:
            self.flipped_at = len(sim.transcript)
            i = self.rng.randrange(len(p.frame) * 8)
            return [FlipBit(i // 8, i % 8)]
        return [Deliver()]


def flip_one_bit(t: MsgType, rng: random.Random, config: SimConfig = SimConfig()) -> tuple[Simulation, str]:
    """Onboard with one bit of the first ``t`` frame flipped; returns the recipient's outcome."""
    adv = BitFlipAdversary(t, rng)
    sim = Simulation(config, adv)
    sim.onboard()
    if adv.flipped_at is None:
        raise RuntimeError(f"no {t.name} frame was sent")
    return sim, sim.transcript.entries[adv.flipped_at].outcome


def random_replay_plan(rng: random.Random, window: int = 25) -> list[tuple[int, int]]:
    """1-3 replays, each after 0-3 further frames, total delay under ``window`` s."""
    plan, budget = [], window
    for _ in range(rng.randint(1, 3)):
        delay = rng.randint(0, budget)
        budget -= delay
        plan.append((rng.randint(0, 3), delay))
    return plan


def _replay_register(config: SimConfig):
    rng = random.Random(config.scenario_seed)
    plan = random_replay_plan(rng) if config.scenario_seed else [(0, 0)]
    sim = Simulation(config, ReplayAdversary(plan))
    sim.onboard()
    regs = [e for e in sim.transcript.of_type(MsgType.DEVICE_REGISTER) if e.recipient == SERVER]
    held = (len(regs) == 1 + len(plan) and regs[0].outcome == ACCEPTED
            and all(e.outcome == ErrorCode.TokenReplayed.name for e in regs[1:])
            and sim.registry.insert_count == 1)
    return sim, held


def _expired_token(config: SimConfig):
    sim = Simulation(config, _OnType(MsgType.DEVICE_REGISTER, lambda s, p: [Delay(61)]))
    sim.onboard()
    regs = sim.transcript.of_type(MsgType.DEVICE_REGISTER)
    held = (len(regs) == 1 and regs[0].outcome == ErrorCode.TokenExpired.name
            and len(sim.registry) == 0)
    return sim, held


def _resealed_provision(sim: Simulation, p: Pending, rng: random.Random) -> bytes:
    """Adversary holding C_K rewrites DEVICE_PROVISION with one signature bit flipped."""
    msg = wire.decode(p.frame)
    ck = NetworkSessionKey(sim.config.ck)
    inner = dict(wire.decode_fields(crypto.aead_open(ck, msg[1], msg[2], protocol.CTX_PROVISION)))
    sig = bytearray(inner[4])
    sig[rng.randrange(len(sig))] ^= 1 << rng.randrange(8)
    inner[4] = bytes(sig)
    ct = crypto.aead_seal(ck, msg[1], wire.encode_fields(inner), protocol.CTX_PROVISION)
    return wire.encode(Message.build(MsgType.DEVICE_PROVISION, {1: msg[1], 2: ct}))


def _tamper_signature(config: SimConfig):
    rng = random.Random(config.scenario_seed)
    sim = Simulation(config, _OnType(MsgType.DEVICE_PROVISION,
                                     lambda s, p: [Inject(_resealed_provision(s, p, rng))]))
    sim.onboard()
    regs = sim.transcript.of_type(MsgType.DEVICE_REGISTER)
    held = (len(regs) == 1 and regs[0].outcome == ErrorCode.BadSignature.name
            and len(sim.registry) == 0)
    return sim, held


def _wrong_ck(config: SimConfig):
    sim = Simulation(replace(config, device_ck=_seed("some other link key")))
    sim.onboard()
    prov = sim.transcript.of_type(MsgType.DEVICE_PROVISION)
    held = (len(prov) == 1 and prov[0].outcome == ErrorCode.DecryptFail.name
            and not sim.transcript.of_type(MsgType.DEVICE_REGISTER)
            and sim.device.phase is protocol.DevicePhase.Unprovisioned)
    return sim, held


def _stale_session(config: SimConfig):
    sim = Simulation(config)
    sim.user_register()
    sim.run()
    sim.clock.advance(config.validity + 1)
    client_refused = not sim.user_add_device()
    # Bypass the authenticator's own check: a forged request straight to the server.
    forged = Message.build(MsgType.ADD_DEVICE_REQUEST, {1: config.account_id.encode()})
    server_outcome = sim.deliver(ADVERSARY, SERVER, wire.encode(forged))
    sim.run()
    no_offer = not sim.transcript.of_type(MsgType.ONBOARD_OFFER)
    # Re-login with fresh root keys and finish onboarding.
    sim.user_relogin(_seed("relogin"))
    sim.run()
    sim.user_add_device()
    sim.run()
    held = (client_refused and server_outcome == ErrorCode.SessionExpired.name and no_offer
            and sim.terminal())
    return sim, held


class _Eavesdropper(Adversary):
    def __init__(self, config: SimConfig) -> None:
        cfg = config.protocol_config()
        self.backend = cfg.backend
        self.keys = crypto.kem_keygen(_seed("eve"), crypto.Role.Authenticator, crypto.Role.Server,
                                      backend=self.backend)
        self.recovered: bytes | None = None
        self.attempts = 0

    def on_frame(self, sim, p):
        if wire.peek_type(p.frame) is MsgType.ONBOARD_OFFER:
            self.attempts += 1
            body = wire.decode(p.frame)[2]
            for attempt in (self._read_plain, self._open_with_own_key):
                try:
                    self.recovered = attempt(body)
                    break
                except (AsopError, wire.DecodeError, KeyError):
                    continue
        return [Deliver()]

    @staticmethod
    def _read_plain(body: bytes) -> bytes:
        t_n = dict(wire.decode_fields(body))[1]
        if len(t_n) != 8 or not t_n.isdigit():
            raise KeyError("not a token")
        return t_n

    def _open_with_own_key(self, body: bytes) -> bytes:
        ct = crypto.HybridCiphertext.from_bytes(body)
        return self._read_plain(crypto.open_sealed(self.keys.secret, ct, protocol.CTX_OFFER,
                                                   backend=self.backend))


def _eavesdrop_offer(config: SimConfig):
    eve = _Eavesdropper(config)
    sim = Simulation(config, eve)
    sim.onboard()
    held = eve.attempts == 1 and eve.recovered is None and sim.terminal()
    return sim, held


def _revoked_device(config: SimConfig):
    sim = Simulation(config)
    sim.onboard()
    sim.device_use_token()
    sim.run()
    uuid = sim.device.device_uuid.value
    sim.registry.revoke(uuid)
    sim.device_use_token()
    sim.run()
    uses = sim.transcript.of_type(MsgType.TOKEN_USE)
    try:
        sim.registry.advance_token(uuid)
        direct = ACCEPTED
    except ProtocolError as exc:
        direct = exc.code.name
    revoked = ErrorCode.RevokedDevice.name
    held = (len(uses) == 2 and uses[0].outcome == ACCEPTED and uses[1].outcome == revoked
            and direct == revoked)
    return sim, held


SCENARIOS: dict[str, Callable[[SimConfig], tuple[Simulation, bool]]] = {
    "replay_register": _replay_register,
    "expired_token": _expired_token,
    "tamper_signature": _tamper_signature,
    "wrong_ck": _wrong_ck,
    "stale_session": _stale_session,
    "eavesdrop_offer": _eavesdrop_offer,
    "revoked_device": _revoked_device,
}

# The defense each scenario exercises, switched off.
MUTATION_TWINS: dict[str, Mutations] = {
    "replay_register": Mutations(single_use_token=False),
    "expired_token": Mutations(check_totp=False),
    "tamper_signature": Mutations(check_signature=False),
    "wrong_ck": Mutations(protect_provision=False),
    "stale_session": Mutations(check_session_expiry=False),
    "eavesdrop_offer": Mutations(seal_offer=False),
    "revoked_device": Mutations(check_revocation=False),
}


def _lookup(name: str):
    try:
        return SCENARIOS[name]
    except KeyError:
        raise UnknownScenario(f"unknown scenario {name!r}; known: {', '.join(SCENARIOS)}") from None


def simulate_scenario(name: str, config: SimConfig = SimConfig()) -> tuple[Simulation, Verdict]:
    sim, held = _lookup(name)(config)
    return sim, Verdict.DefenseHeld if held else Verdict.DefenseBreached


def run_scenario(name: str, config: SimConfig = SimConfig()) -> tuple[Transcript, Verdict]:
    sim, verdict = simulate_scenario(name, config)
    return sim.transcript, verdict


def run_mutation_twin(name: str, config: SimConfig = SimConfig()) -> tuple[Transcript, Verdict]:
    _lookup(name)
    return run_scenario(name, replace(config, mutations=MUTATION_TWINS[name]))
