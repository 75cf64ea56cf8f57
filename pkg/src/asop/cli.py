"""Command-line entry point: ``asop serve | register | add-device | device run |
device use-token | revoke | simulate``.

Exit status is 0 on success and the numeric protocol error code otherwise
(111 when the peer refuses the connection).
"""

from __future__ import annotations

import argparse
import logging
import os
import signal
import sys
import threading
import uuid
from dataclasses import replace

from . import crypto, protocol, sim, transport
from .crypto import NetworkSessionKey
from .errors import AsopError, CryptoError, ErrorCode, ProtocolError, StoreCorrupt
from .protocol import ProtocolConfig

EXIT_CONNREFUSED = 111
log = logging.getLogger("asop")


def _hex32(s: str) -> bytes:
    try:
        b = bytes.fromhex(s)
    except ValueError:
        raise argparse.ArgumentTypeError("expected hex") from None
    if len(b) != 32:
        raise argparse.ArgumentTypeError("expected 32 bytes (64 hex digits)")
    return b


def _hostport(s: str) -> tuple[str, int]:
    try:
        return transport.parse_hostport(s)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="asop", description="ASOP onboarding demo over TCP")
    p.add_argument("--backend", choices=["toy", "pqc"], default=None,
                   help="crypto backend (env ASOP_BACKEND, default toy)")
    p.add_argument("--toy-keydir", default=None,
                   help="file shared by processes so the toy verifier can find signing keys "
                        "(env ASOP_TOY_KEYDIR, default ./asop-toy-keys.json)")
    p.add_argument("--transcript", default=None, help="write this process's frames as JSON lines")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("serve", help="run the server daemon")
    s.add_argument("--bind", type=_hostport, default=("127.0.0.1", 7373))
    s.add_argument("--store", default=None, help="registry file (env ASOP_STORE, default asop-store.bin)")
    s.add_argument("--seed", type=_hex32, default=None)
    s.add_argument("--api-path", default="/asop/v1")
    s.add_argument("--now", type=int, default=None, help="freeze the server clock (deterministic demos)")

    r = sub.add_parser("register", help="create an account session from the authenticator")
    r.add_argument("--server", type=_hostport, default=("127.0.0.1", 7373))
    r.add_argument("--account", required=True)
    r.add_argument("--ck", type=_hex32, required=True, help="C_K shared with the device")
    r.add_argument("--seed", type=_hex32, default=None)
    r.add_argument("--state", default="asop-authenticator.json")
    r.add_argument("--now", type=int, default=None)

    a = sub.add_parser("add-device", help="onboard a listening device")
    a.add_argument("--server", type=_hostport, default=("127.0.0.1", 7373))
    a.add_argument("--device", type=_hostport, default=("127.0.0.1", 7474))
    a.add_argument("--state", default="asop-authenticator.json")
    a.add_argument("--now", type=int, default=None)

    d = sub.add_parser("device", help="device-side commands")
    dsub = d.add_subparsers(dest="device_command", required=True)
    dr = dsub.add_parser("run", help="wait for provisioning, then register with the server")
    dr.add_argument("--bind", type=_hostport, default=("127.0.0.1", 7474))
    dr.add_argument("--ck", type=_hex32, required=True)
    dr.add_argument("--seed", type=_hex32, default=None)
    dr.add_argument("--state", default="asop-device.json")
    dr.add_argument("--timeout", type=float, default=None)
    dr.add_argument("--now", type=int, default=None)
    du = dsub.add_parser("use-token", help="present the next chained long-lived token")
    du.add_argument("--state", default="asop-device.json")

    v = sub.add_parser("revoke", help="revoke an onboarded device")
    v.add_argument("uuid")
    v.add_argument("--server", type=_hostport, default=("127.0.0.1", 7373))
    v.add_argument("--state", default="asop-authenticator.json")

    m = sub.add_parser("simulate", help="run a scenario in the in-memory harness")
    m.add_argument("scenario", help=f"one of: happy_path, {', '.join(sim.SCENARIOS)}")
    m.add_argument("--mutation-twin", action="store_true",
                   help="run against a build with the scenario's defense disabled")
    m.add_argument("--scenario-seed", type=int, default=0)
    return p


def _config(args) -> ProtocolConfig:
    name = args.backend or os.environ.get("ASOP_BACKEND", "toy")
    if name == "toy":
        keydir = args.toy_keydir or os.environ.get("ASOP_TOY_KEYDIR", "asop-toy-keys.json")
        backend = crypto.ToyBackend(crypto.ToyKeyDirectory(keydir))
    else:
        backend = crypto.get_backend(name)
    return ProtocolConfig(backend=backend)


def _clock(now: int | None):
    return (lambda: now) if now is not None else transport.wall_clock


def _recorder(args, clock):
    return transport.FrameRecorder(clock) if args.transcript else None


def _write_transcript(args, recorder) -> None:
    if recorder is not None:
        recorder.transcript().write(args.transcript)


def cmd_serve(args, cfg) -> int:
    store = args.store or os.environ.get("ASOP_STORE", "asop-store.bin")
    clock = _clock(args.now)
    recorder = _recorder(args, clock)
    srv = transport.make_server(args.bind, cfg, args.seed or os.urandom(32), store_path=store,
                                api_path=args.api_path, clock=clock, recorder=recorder)

    def stop(signum, frame):
        threading.Thread(target=srv.shutdown, daemon=True).start()

    signal.signal(signal.SIGTERM, stop)
    signal.signal(signal.SIGINT, stop)
    host, port = srv.address
    print(f"asop server listening on {host}:{port}, store {store}", flush=True)
    try:
        srv.serve_forever()
    finally:
        srv.flush()
        srv.server_close()
        _write_transcript(args, recorder)
    return 0


def cmd_register(args, cfg) -> int:
    clock = _clock(args.now)
    recorder = _recorder(args, clock)
    st = protocol.authenticator_new(args.account, NetworkSessionKey(args.ck), args.seed or os.urandom(32),
                                    cfg, now=clock())
    st = transport.authenticator_register(st, args.server, cfg, clock, recorder)
    transport.save_authenticator(st, args.state)
    _write_transcript(args, recorder)
    print(f"registered account {args.account}; root keys valid until {st.session_expiry}")
    return 0


def cmd_add_device(args, cfg) -> int:
    clock = _clock(args.now)
    recorder = _recorder(args, clock)
    st = transport.load_authenticator(args.state)
    if st.phase is protocol.AuthPhase.Done:
        st = replace(st, phase=protocol.AuthPhase.Registered, connected_device=None)
    try:
        st = transport.authenticator_add_device(st, args.server, args.device, cfg, clock, recorder)
    finally:
        _write_transcript(args, recorder)
    transport.save_authenticator(st, args.state)
    print(f"device {uuid.UUID(bytes=st.connected_device)} connected")
    return 0


def cmd_device_run(args, cfg) -> int:
    clock = _clock(args.now)
    recorder = _recorder(args, clock)
    st = protocol.device_new(NetworkSessionKey(args.ck), args.seed or os.urandom(32))
    daemon = transport.DeviceDaemon(st, args.bind, cfg, clock, recorder,
                                    on_state=lambda s: transport.save_device(s, args.state))
    print(f"device waiting for provisioning on {daemon.address[0]}:{daemon.address[1]}", flush=True)
    try:
        st = daemon.serve_once(args.timeout)
    finally:
        _write_transcript(args, recorder)
    print(f"onboarded as {st.device_uuid}")
    return 0


def cmd_device_use_token(args, cfg) -> int:
    st = transport.load_device(args.state)
    st, counter = transport.device_use_token(st, cfg)
    transport.save_device(st, args.state)
    print(f"token accepted at counter {counter}")
    return 0


def cmd_revoke(args, cfg) -> int:
    st = transport.load_authenticator(args.state)
    transport.authenticator_revoke(st, args.server, uuid.UUID(args.uuid).bytes, cfg)
    print(f"revoked {args.uuid}")
    return 0


def cmd_simulate(args, cfg) -> int:
    config = replace(sim.SimConfig(), scenario_seed=args.scenario_seed)
    if args.scenario == "happy_path":
        transcript = sim.run_happy_path(config)
        verdict = "Completed"
    elif args.mutation_twin:
        transcript, verdict = sim.run_mutation_twin(args.scenario, config)
    else:
        transcript, verdict = sim.run_scenario(args.scenario, config)
    path = args.transcript or f"{args.scenario}.jsonl"
    transcript.write(path)
    print(f"{args.scenario}: {getattr(verdict, 'value', verdict)} ({len(transcript)} frames, transcript {path})")
    return 0


COMMANDS = {
    "serve": cmd_serve, "register": cmd_register, "add-device": cmd_add_device,
    "revoke": cmd_revoke, "simulate": cmd_simulate,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.command == "device":
        fn = cmd_device_run if args.device_command == "run" else cmd_device_use_token
    else:
        fn = COMMANDS[args.command]
    try:
        return fn(args, _config(args))
    except ProtocolError as exc:
        print(f"error: {exc.code.name} ({int(exc.code):#06x}) {exc.detail}", file=sys.stderr)
        return int(exc.code)
    except sim.UnknownScenario as exc:
        print(f"error: {exc.args[0]}", file=sys.stderr)
        return int(ErrorCode.ProtocolViolation)
    except ConnectionRefusedError as exc:
        print(f"error: connection refused: {exc}", file=sys.stderr)
        return EXIT_CONNREFUSED
    except (StoreCorrupt, CryptoError, AsopError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return int(ErrorCode.Internal)


if __name__ == "__main__":
    sys.exit(main())
