import os
import re
import socket
import struct
import subprocess
import sys
import threading
from dataclasses import replace

import pytest

from asop import cli, protocol, sim, transport, wire
from asop.errors import ErrorCode
from asop.protocol import AuthPhase, DevicePhase
from asop.wire import MsgType

from conftest import seed, tcp_onboard


def stop(srv):
    srv.shutdown()
    srv.server_close()


def test_tcp_transcript_matches_harness():
    srv, rec, st, dev = tcp_onboard()
    try:
        tcp = rec.transcript()
        harness = sim.run_happy_path(replace(sim.SimConfig(), server_api=srv.node.server_api))
        assert tcp.frames() == harness.frames()
        assert [(e.sender, e.recipient, e.outcome) for e in tcp] == \
               [(e.sender, e.recipient, e.outcome) for e in harness]
        assert st.phase is AuthPhase.Done and dev.phase is DevicePhase.Onboarded
    finally:
        stop(srv)


def test_frame_roundtrip_over_socketpair():
    a, b = socket.socketpair()
    with a, b:
        transport.send_frame(a, b"hello")
        transport.send_frame(a, b"")
        assert transport.recv_frame(b) == b"hello"
        assert transport.recv_frame(b) == b""


def test_oversized_frame_gets_error_then_close():
    cfg = sim.SimConfig().protocol_config()
    srv = transport.make_server(("127.0.0.1", 0), cfg, seed("s"))
    transport.serve_in_thread(srv)
    try:
        with socket.create_connection(srv.address, timeout=5) as s:
            s.sendall(struct.pack(">I", transport.MAX_FRAME + 1))
            reply = wire.decode(transport.recv_frame(s))
            assert reply.msg_type is MsgType.ERROR
            assert protocol.parse_error(reply).code is ErrorCode.FrameTooLarge
            assert s.recv(1) == b""
    finally:
        stop(srv)


def test_sender_refuses_oversized_frame():
    a, b = socket.socketpair()
    with a, b, pytest.raises(transport.FrameTooLarge):
        transport.send_frame(a, bytes(transport.MAX_FRAME + 1))


def test_malformed_frame_gets_error_and_connection_stays_open():
    cfg = sim.SimConfig().protocol_config()
    srv = transport.make_server(("127.0.0.1", 0), cfg, seed("s"))
    transport.serve_in_thread(srv)
    try:
        with socket.create_connection(srv.address, timeout=5) as s:
            transport.send_frame(s, b"JUNKJUNK")
            err = protocol.parse_error(wire.decode(transport.recv_frame(s)))
            assert err.code is ErrorCode.MalformedMessage
            transport.send_frame(s, wire.encode(wire.Message.build(MsgType.ADD_DEVICE_REQUEST, {1: b"nobody"})))
            err = protocol.parse_error(wire.decode(transport.recv_frame(s)))
            assert err.code is ErrorCode.NoSession
    finally:
        stop(srv)


def test_two_concurrent_onboardings():
    cfg = sim.SimConfig().protocol_config()
    srv = transport.make_server(("127.0.0.1", 0), cfg, seed("shared server"))
    transport.serve_in_thread(srv)
    results, errors = {}, []

    def onboard(name):
        try:
            link = protocol.NetworkSessionKey(seed(f"ck-{name}"))
            dev = transport.DeviceDaemon(protocol.device_new(link, seed(f"dev-{name}")), ("127.0.0.1", 0), cfg)
            worker = dev.start(timeout=10)
            st = protocol.authenticator_new(name, link, seed(f"auth-{name}"), cfg, transport.wall_clock())
            st = transport.authenticator_register(st, srv.address, cfg)
            st = transport.authenticator_add_device(st, srv.address, dev.address, cfg)
            worker.join(10)
            results[name] = (st, dev.state)
        except Exception as exc:  # collected for the assertion below
            errors.append(exc)

    threads = [threading.Thread(target=onboard, args=(n,)) for n in ("alice", "bob")]
    for t in threads:
        t.start()
    for t in threads:
        t.join(30)
    try:
        assert not errors
        assert len(srv.node.registry) == 2
        for st, dev in results.values():
            assert st.connected_device == dev.device_uuid.value
            assert srv.node.registry.lookup(dev.device_uuid.value).t_d_head == dev.long_token
    finally:
        stop(srv)


def test_registry_survives_restart(tmp_path):
    store = tmp_path / "store.bin"
    srv, _, st, dev = tcp_onboard(store_path=str(store))
    before = srv.node.registry.records()
    stop(srv)
    cfg = sim.SimConfig().protocol_config()
    srv2 = transport.make_server(("127.0.0.1", 0), cfg, seed("restarted"), store_path=str(store))
    transport.serve_in_thread(srv2)
    try:
        assert srv2.node.registry.records() == before
        host, port = srv2.address
        moved = replace(dev, server_api=replace(dev.server_api, host=host, port=port))
        _, counter = transport.device_use_token(moved, cfg)
        assert counter == 1
        # the advance was flushed to disk before the reply
        assert transport.Registry.load(store).lookup(dev.device_uuid.value).t_d_head.counter == 1
    finally:
        stop(srv2)


def test_state_files_roundtrip(tmp_path):
    srv, _, st, dev = tcp_onboard()
    stop(srv)
    transport.save_authenticator(st, tmp_path / "a.json")
    transport.save_device(dev, tmp_path / "d.json")
    assert transport.load_authenticator(tmp_path / "a.json") == st
    assert transport.load_device(tmp_path / "d.json") == dev


def test_parse_hostport():
    assert transport.parse_hostport("localhost:7373") == ("localhost", 7373)
    with pytest.raises(ValueError):
        transport.parse_hostport("7373")


# -- CLI --


def test_cli_simulate(tmp_path, capsys):
    out = tmp_path / "h.jsonl"
    assert cli.main(["--transcript", str(out), "simulate", "happy_path"]) == 0
    assert len(out.read_text().splitlines()) == 8
    assert cli.main(["--transcript", str(out), "simulate", "replay_register"]) == 0
    assert "DefenseHeld" in capsys.readouterr().out
    assert cli.main(["--transcript", str(out), "simulate", "replay_register", "--mutation-twin"]) == 0
    assert "DefenseBreached" in capsys.readouterr().out


def test_cli_unknown_scenario(tmp_path):
    assert cli.main(["--transcript", str(tmp_path / "x"), "simulate", "nope"]) != 0


def test_cli_add_device_without_register(tmp_path, capsys):
    code = cli.main(["add-device", "--state", str(tmp_path / "missing.json")])
    assert code == int(ErrorCode.NoSession)
    assert "NoSession" in capsys.readouterr().err


def test_cli_connection_refused(tmp_path):
    with socket.socket() as s:
        s.bind(("127.0.0.1", 0))
        port = s.getsockname()[1]
    code = cli.main(["--toy-keydir", str(tmp_path / "k.json"), "register", "--server", f"127.0.0.1:{port}",
                     "--account", "a", "--ck", "00" * 32, "--state", str(tmp_path / "a.json")])
    assert code == cli.EXIT_CONNREFUSED


def _spawn(args, cwd, env):
    return subprocess.Popen([sys.executable, "-m", "asop.cli", *args], cwd=cwd, env=env,
                            stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)


def _port(proc):
    line = proc.stdout.readline()
    m = re.search(r":(\d+)", line)
    assert m, line + proc.stderr.read()
    return int(m.group(1))


def _run(args, cwd, env):
    return subprocess.run([sys.executable, "-m", "asop.cli", *args], cwd=cwd, env=env,
                          capture_output=True, text=True, timeout=30)


def test_cli_end_to_end_processes(tmp_path):
    env = {**os.environ, "ASOP_TOY_KEYDIR": str(tmp_path / "keys.json"), "ASOP_STORE": str(tmp_path / "store.bin")}
    ck = "11" * 32
    server = _spawn(["serve", "--bind", "127.0.0.1:0", "--seed", "22" * 32], tmp_path, env)
    try:
        sport = _port(server)
        device = _spawn(["device", "run", "--bind", "127.0.0.1:0", "--ck", ck, "--seed", "33" * 32,
                         "--timeout", "20"], tmp_path, env)
        dport = _port(device)
        r = _run(["register", "--server", f"127.0.0.1:{sport}", "--account", "alice", "--ck", ck,
                  "--seed", "44" * 32], tmp_path, env)
        assert r.returncode == 0, r.stderr
        r = _run(["add-device", "--server", f"127.0.0.1:{sport}", "--device", f"127.0.0.1:{dport}"], tmp_path, env)
        assert r.returncode == 0, r.stderr
        assert device.wait(20) == 0, device.stderr.read()
        uuid = re.search(r"device (\S+) connected", r.stdout).group(1)

        r = _run(["device", "use-token"], tmp_path, env)
        assert r.returncode == 0 and "counter 1" in r.stdout, r.stderr
        r = _run(["revoke", uuid, "--server", f"127.0.0.1:{sport}"], tmp_path, env)
        assert r.returncode == 0, r.stderr
        r = _run(["device", "use-token"], tmp_path, env)
        assert r.returncode == int(ErrorCode.RevokedDevice)
        assert "RevokedDevice" in r.stderr
    finally:
        server.terminate()
        server.wait(10)
    assert (tmp_path / "store.bin").exists()
