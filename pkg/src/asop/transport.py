"""TCP transport: 4-byte big-endian length prefix + one wire frame.

The server daemon wraps a ``ServerNode``; the authenticator and device sides
are plain functions so the CLI and the tests drive the same code. All three
can share a ``FrameRecorder`` that produces a transcript in the same format
as the simulator, recorded at the sender so the order is causal.
"""

from __future__ import annotations

import json
import logging
import queue
import socket
import socketserver
import struct
import threading
import time
from dataclasses import asdict
from pathlib import Path
from typing import Callable

from . import protocol, wire
from .crypto import KemKeyPair, LongLivedToken, NetworkSessionKey, Role, SigKeyPair
from .errors import ErrorCode, ProtocolError, StoreCorrupt
from .protocol import AuthenticatorState, DeviceState, ProtocolConfig, ServerApiAddress
from .registry import Registry
from .sim import ACCEPTED, AUTHENTICATOR, DEVICE, SERVER, Transcript, TranscriptEntry
from .wire import Message, MsgType

log = logging.getLogger(__name__)

MAX_FRAME = 1 << 20
NOTIFY_TIMEOUT = 60.0
Clock = Callable[[], int]


def wall_clock() -> int:
    return int(time.time())


class FrameTooLarge(ProtocolError):
    def __init__(self, length: int) -> None:
        super().__init__(ErrorCode.FrameTooLarge, f"{length} bytes exceeds {MAX_FRAME}")


def parse_hostport(s: str) -> tuple[str, int]:
    host, _, port = s.rpartition(":")
    if not host or not port.isdigit():
        raise ValueError(f"expected host:port, got {s!r}")
    return host, int(port)


def send_frame(sock: socket.socket, frame: bytes) -> None:
    if len(frame) > MAX_FRAME:
        raise FrameTooLarge(len(frame))
    sock.sendall(struct.pack(">I", len(frame)) + frame)


def _recv_exact(sock: socket.socket, n: int) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        chunk = sock.recv(n - len(buf))
        if not chunk:
            raise ConnectionError("peer closed the connection")
        buf += chunk
    return bytes(buf)


def recv_frame(sock: socket.socket) -> bytes:
    (length,) = struct.unpack(">I", _recv_exact(sock, 4))
    if length > MAX_FRAME:
        raise FrameTooLarge(length)
    return _recv_exact(sock, length)


class FrameRecorder:
    """Thread-safe transcript builder shared by the endpoints of one run."""

    def __init__(self, clock: Clock = wall_clock) -> None:
        self.clock = clock
        self._lock = threading.Lock()
        self._entries: list[list] = []

    def sent(self, sender: str, recipient: str, frame: bytes) -> None:
        with self._lock:
            self._entries.append([self.clock(), sender, recipient, frame, None])

    def settle(self, frame: bytes, outcome: str) -> None:
        with self._lock:
            for e in reversed(self._entries):
                if e[3] == frame and e[4] is None:
                    e[4] = outcome
                    return

    def transcript(self) -> Transcript:
        with self._lock:
            return Transcript([TranscriptEntry(t, s, r, f, o or ACCEPTED) for t, s, r, f, o in self._entries])


class _NullRecorder(FrameRecorder):
    def sent(self, *a):
        pass

    def settle(self, *a):
        pass


class Channel:
    """One client-side TCP connection with transcript hooks."""

    def __init__(self, addr: tuple[str, int], me: str, peer: str, recorder: FrameRecorder | None = None,
                 timeout: float = NOTIFY_TIMEOUT) -> None:
        self.me, self.peer = me, peer
        self.recorder = recorder or _NullRecorder()
        self.sock = socket.create_connection(addr, timeout=timeout)

    def send(self, msg: Message) -> None:
        frame = wire.encode(msg)
        self.recorder.sent(self.me, self.peer, frame)
        send_frame(self.sock, frame)

    def recv(self) -> Message:
        frame = recv_frame(self.sock)
        msg = wire.decode(frame)
        if msg.msg_type is MsgType.ERROR:
            err = protocol.parse_error(msg)
            self.recorder.settle(frame, err.code.name)
            raise err
        return msg

    def settle(self, msg: Message, outcome: str = ACCEPTED) -> None:
        self.recorder.settle(wire.encode(msg), outcome)

    def close(self) -> None:
        self.sock.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


# -- server daemon --


class _ServerHandler(socketserver.BaseRequestHandler):
    server: "AsopServer"

    def _send(self, msg: Message, to: str) -> None:
        frame = wire.encode(msg)
        if msg.msg_type is not MsgType.ERROR:
            self.server.recorder.sent(SERVER, to, frame)
        send_frame(self.request, frame)

    def handle(self) -> None:
        srv = self.server
        while True:
            try:
                frame = recv_frame(self.request)
            except FrameTooLarge as exc:
                self._send(protocol.error_message(exc.code, exc.detail), "client")
                return
            except (ConnectionError, OSError):
                return
            try:
                msg = wire.decode(frame)
            except wire.DecodeError as exc:
                srv.recorder.settle(frame, ErrorCode.MalformedMessage.name)
                self._send(protocol.error_message(ErrorCode.MalformedMessage, str(exc)), "client")
                continue
            if msg.msg_type is MsgType.ADD_DEVICE_REQUEST and msg.get(1) is not None:
                box = srv.mailbox(msg[1].decode(errors="replace"))
                while not box.empty():
                    box.get_nowait()
            peer = DEVICE if msg.msg_type in (MsgType.DEVICE_REGISTER, MsgType.TOKEN_USE) else AUTHENTICATOR
            try:
                reply, notify = srv.node.handle(msg, srv.clock())
            except ProtocolError as exc:
                srv.recorder.settle(frame, exc.code.name)
                log.info("rejected %s: %s", msg.msg_type.name, exc)
                self._send(protocol.error_message(exc.code, exc.detail), peer)
                continue
            srv.recorder.settle(frame, ACCEPTED)
            if msg.msg_type in (MsgType.DEVICE_REGISTER, MsgType.TOKEN_USE, MsgType.REVOKE_REQUEST):
                srv.flush()
            if reply is not None:
                self._send(reply, peer)
            if notify is not None:
                account, note = notify
                srv.recorder.sent(SERVER, AUTHENTICATOR, wire.encode(note))
                srv.mailbox(account).put(note)
            if msg.msg_type is MsgType.ADD_DEVICE_REQUEST:
                account = msg[1].decode(errors="replace")
                try:
                    note = srv.mailbox(account).get(timeout=srv.notify_timeout)
                except queue.Empty:
                    return
                send_frame(self.request, wire.encode(note))


class AsopServer(socketserver.ThreadingTCPServer):
    allow_reuse_address = True
    daemon_threads = True

    def __init__(self, bind: tuple[str, int], node: protocol.ServerNode, store_path: str | None = None,
                 clock: Clock = wall_clock, recorder: FrameRecorder | None = None,
                 notify_timeout: float = NOTIFY_TIMEOUT) -> None:
        self.node = node
        self.store_path = store_path
        self.clock = clock
        self.recorder = recorder or _NullRecorder()
        self.notify_timeout = notify_timeout
        self._mailboxes: dict[str, queue.Queue] = {}
        self._mail_lock = threading.Lock()
        super().__init__(bind, _ServerHandler)

    def mailbox(self, account: str) -> queue.Queue:
        with self._mail_lock:
            return self._mailboxes.setdefault(account, queue.Queue())

    def flush(self) -> None:
        if self.store_path:
            with self.node.lock:
                self.node.registry.persist(self.store_path)

    @property
    def address(self) -> tuple[str, int]:
        return self.server_address[:2]


def make_server(bind: tuple[str, int], cfg: ProtocolConfig, seed: bytes, *, store_path: str | None = None,
                api_path: str = "/asop/v1", advertise: tuple[str, int] | None = None,
                clock: Clock = wall_clock, recorder: FrameRecorder | None = None) -> AsopServer:
    """Build a server, loading the registry from ``store_path`` if it exists.

    The advertised API address (carried in offers) defaults to the bound
    address; pass port 0 to bind an ephemeral port.
    """
    registry = None
    if store_path and Path(store_path).exists():
        registry = Registry.load(store_path, enforce_revocation=cfg.mutations.check_revocation)
    placeholder = ServerApiAddress(bind[0] or "127.0.0.1", bind[1] or 1, api_path)
    node = protocol.ServerNode(cfg, protocol.ServerSeeds(seed), placeholder, registry)
    srv = AsopServer(bind, node, store_path, clock, recorder)
    host, port = advertise or srv.address
    node.server_api = ServerApiAddress(host, port, api_path)
    return srv


def serve_in_thread(srv: AsopServer) -> threading.Thread:
    t = threading.Thread(target=srv.serve_forever, kwargs={"poll_interval": 0.05}, name="asop-server", daemon=True)
    t.start()
    return t


# -- authenticator client --


def authenticator_register(st: AuthenticatorState, server: tuple[str, int], cfg: ProtocolConfig,
                           clock: Clock = wall_clock, recorder: FrameRecorder | None = None) -> AuthenticatorState:
    with Channel(server, AUTHENTICATOR, SERVER, recorder) as ch:
        ch.send(protocol.authenticator_register(st))
        ack = ch.recv()
        st = protocol.authenticator_process_ack(st, ack, clock())
        ch.settle(ack)
    return st


def authenticator_add_device(st: AuthenticatorState, server: tuple[str, int], device: tuple[str, int],
                             cfg: ProtocolConfig, clock: Clock = wall_clock,
                             recorder: FrameRecorder | None = None) -> AuthenticatorState:
    st, request = protocol.authenticator_request_add_device(st, clock(), cfg)
    with Channel(server, AUTHENTICATOR, SERVER, recorder) as ch:
        ch.send(request)
        offer = ch.recv()
        st, provision = protocol.authenticator_process_offer(st, offer, cfg)
        ch.settle(offer)
        with Channel(device, AUTHENTICATOR, DEVICE, recorder) as dev:
            dev.send(provision)
        note = ch.recv()
        st = protocol.authenticator_process_notify(st, note, cfg)
        ch.settle(note)
    return st


def authenticator_revoke(st: AuthenticatorState, server: tuple[str, int], device_uuid: bytes,
                         cfg: ProtocolConfig, recorder: FrameRecorder | None = None) -> None:
    with Channel(server, AUTHENTICATOR, SERVER, recorder) as ch:
        ch.send(protocol.authenticator_revoke(st, device_uuid, cfg))
        ch.recv()


# -- device daemon --


class DeviceDaemon:
    """Listens for one DEVICE_PROVISION, then registers with the server it names."""

    def __init__(self, st: DeviceState, bind: tuple[str, int], cfg: ProtocolConfig,
                 clock: Clock = wall_clock, recorder: FrameRecorder | None = None,
                 on_state: Callable[[DeviceState], None] | None = None) -> None:
        self.state = st
        self.cfg = cfg
        self.clock = clock
        self.recorder = recorder or _NullRecorder()
        self.on_state = on_state
        self.error: ProtocolError | None = None
        self.done = threading.Event()
        self.listener = socket.create_server(bind)
        self.address = self.listener.getsockname()[:2]

    def _update(self, st: DeviceState) -> None:
        self.state = st
        if self.on_state:
            self.on_state(st)

    def serve_once(self, timeout: float | None = None) -> DeviceState:
        self.listener.settimeout(timeout)
        try:
            while self.state.phase is not protocol.DevicePhase.Onboarded:
                conn, _ = self.listener.accept()
                with conn:
                    try:
                        frame = recv_frame(conn)
                    except (ConnectionError, ProtocolError, OSError):
                        continue
                self._handle(frame)
        finally:
            self.listener.close()
            self.done.set()
        return self.state

    def _handle(self, frame: bytes) -> None:
        try:
            msg = wire.decode(frame)
            st, register = protocol.device_process_provision(self.state, msg, self.clock(), self.cfg)
        except (wire.DecodeError, ProtocolError) as exc:
            code = exc.code.name if isinstance(exc, ProtocolError) else ErrorCode.MalformedMessage.name
            self.recorder.settle(frame, code)
            log.warning("provision rejected: %s", exc)
            return
        self.recorder.settle(frame, ACCEPTED)
        self._update(st)
        api = st.server_api
        try:
            with Channel((api.host, api.port), DEVICE, SERVER, self.recorder) as ch:
                ch.send(register)
                accept = ch.recv()
                self._update(protocol.device_process_accept(self.state, accept, self.cfg))
                ch.settle(accept)
        except ProtocolError as exc:
            self.error = exc
            log.warning("registration failed: %s", exc)
            raise

    def start(self, timeout: float | None = None) -> threading.Thread:
        def run():
            try:
                self.serve_once(timeout)
            except Exception as exc:  # surfaced through self.error
                if self.error is None:
                    self.error = exc
        t = threading.Thread(target=run, name="asop-device", daemon=True)
        t.start()
        return t


def device_use_token(st: DeviceState, cfg: ProtocolConfig,
                     recorder: FrameRecorder | None = None) -> tuple[DeviceState, int]:
    """Present the next chained token; returns the new state and its counter."""
    new, msg = protocol.device_token_use(st, cfg)
    api = st.server_api
    with Channel((api.host, api.port), DEVICE, SERVER, recorder) as ch:
        ch.send(msg)
        ack = ch.recv()
    return new, wire.read_uint(ack[2], 8)


# -- state files for the CLI --


def _hexify(obj):
    if isinstance(obj, bytes):
        return {"hex": obj.hex()}
    if isinstance(obj, dict):
        return {k: _hexify(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_hexify(v) for v in obj]
    return obj


def _unhex(obj):
    if isinstance(obj, dict):
        if set(obj) == {"hex"}:
            return bytes.fromhex(obj["hex"])
        return {k: _unhex(v) for k, v in obj.items()}
    return obj


def _kem(d: dict | None) -> KemKeyPair | None:
    if d is None:
        return None
    return KemKeyPair(d["public"], d["secret"], Role(d["owner_role"]), Role(d["peer_role"]),
                      d["created_at"], d["validity"])


def save_authenticator(st: AuthenticatorState, path: str | Path) -> None:
    d = asdict(st)
    d["phase"] = st.phase.name
    Path(path).write_text(json.dumps(_hexify(d), indent=2, sort_keys=True))


def load_authenticator(path: str | Path) -> AuthenticatorState:
    p = Path(path)
    if not p.exists():
        raise ProtocolError(ErrorCode.NoSession, f"no authenticator state at {p}; run 'register' first")
    d = _unhex(json.loads(p.read_text()))
    return AuthenticatorState(
        account_id=d["account_id"], kem_pair=_kem(d["kem_pair"]),
        sig_pair=SigKeyPair(d["sig_pair"]["public"], d["sig_pair"]["secret"], Role(d["sig_pair"]["owner_role"])),
        ck=NetworkSessionKey(d["ck"]["key"]), seed_root=d["seed_root"], phase=protocol.AuthPhase[d["phase"]],
        server_kem_pk=d["server_kem_pk"], session_expiry=d["session_expiry"], seed_counter=d["seed_counter"],
        nonce_counter=d["nonce_counter"], ck_nonce_counter=d["ck_nonce_counter"],
        connected_device=d["connected_device"])


def save_device(st: DeviceState, path: str | Path) -> None:
    d = asdict(st)
    d["phase"] = st.phase.name
    Path(path).write_text(json.dumps(_hexify(d), indent=2, sort_keys=True))


def load_device(path: str | Path) -> DeviceState:
    d = _unhex(json.loads(Path(path).read_text()))
    api = d["server_api"]
    tok = d["long_token"]
    return DeviceState(
        ck=NetworkSessionKey(d["ck"]["key"]), seed_root=d["seed_root"], phase=protocol.DevicePhase[d["phase"]],
        server_api=ServerApiAddress(**api) if api else None, server_kem_pk=d["server_kem_pk"],
        kem_pair=_kem(d["kem_pair"]),
        device_uuid=protocol.DeviceUuid(d["device_uuid"]["value"]) if d["device_uuid"] else None,
        long_token=LongLivedToken(**tok) if tok else None, server_device_pk=d["server_device_pk"],
        seed_counter=d["seed_counter"], nonce_counter=d["nonce_counter"])


__all__ = [
    "AsopServer", "Channel", "DeviceDaemon", "FrameRecorder", "FrameTooLarge", "MAX_FRAME",
    "authenticator_add_device", "authenticator_register", "authenticator_revoke", "device_use_token",
    "load_authenticator", "load_device", "make_server", "parse_hostport", "recv_frame",
    "save_authenticator", "save_device", "send_frame", "serve_in_thread", "StoreCorrupt",
]
