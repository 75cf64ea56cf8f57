import hashlib

import pytest

from asop import protocol
from asop.crypto import NetworkSessionKey
from asop.protocol import ProtocolConfig, ServerApiAddress
from asop.registry import Registry

T0 = 1_500_000_000
API = ServerApiAddress("cloud.example", 443, "/asop/v1")


def seed(label: str) -> bytes:
    return hashlib.sha256(label.encode()).digest()


class Flow:
    """Drives the three machines by hand, one protocol step per method."""

    def __init__(self, cfg: ProtocolConfig | None = None, now: int = T0) -> None:
        self.cfg = cfg or ProtocolConfig()
        self.now = now
        self.ck = NetworkSessionKey(seed("ck"))
        self.seeds = protocol.ServerSeeds(seed("server"))
        self.registry = Registry()
        self.auth = protocol.authenticator_new("alice", self.ck, seed("auth"), self.cfg, now)
        self.device = protocol.device_new(self.ck, seed("device"))
        self.session = None

    def register(self):
        init = protocol.authenticator_register(self.auth)
        self.session, ack = protocol.server_register_account(init, self.now, self.seeds, self.cfg)
        self.auth = protocol.authenticator_process_ack(self.auth, ack, self.now)
        return ack

    def offer(self):
        self.auth, req = protocol.authenticator_request_add_device(self.auth, self.now, self.cfg)
        self.session, offer = protocol.server_handle_add_device(self.session, self.now, API, self.seeds, self.cfg)
        return offer

    def provision(self, offer=None):
        if offer is None:
            offer = self.offer()
        self.auth, prov = protocol.authenticator_process_offer(self.auth, offer, self.cfg)
        return prov

    def device_register(self, prov=None):
        if prov is None:
            prov = self.provision()
        self.device, reg = protocol.device_process_provision(self.device, prov, self.now, self.cfg)
        return reg

    def server_register(self, reg):
        self.session, accept, notify = protocol.server_process_device_register(
            self.session, self.registry, reg, self.now, self.seeds, self.cfg)
        return accept, notify

    def full(self):
        self.register()
        accept, notify = self.server_register(self.device_register())
        self.device = protocol.device_process_accept(self.device, accept, self.cfg)
        self.auth = protocol.authenticator_process_notify(self.auth, notify, self.cfg)
        return self


@pytest.fixture
def flow():
    return Flow()


def tcp_onboard(config=None, *, store_path=None, account=None, auth_seed=None, device_seed=None, ck=None):
    """One full onboarding over loopback TCP with a frozen clock.

    Returns ``(server, recorder, authenticator_state, device_state)``; the
    server is still running and must be shut down by the caller.
    """

    from asop import sim, transport

    config = config or sim.SimConfig()
    cfg = config.protocol_config()
    clock = lambda: config.start_time  # noqa: E731
    rec = transport.FrameRecorder(clock)
    srv = transport.make_server(("127.0.0.1", 0), cfg, config.server_seed, store_path=store_path,
                                api_path=config.server_api.path, clock=clock, recorder=rec)
    transport.serve_in_thread(srv)
    link = NetworkSessionKey(ck or config.ck)
    dev = transport.DeviceDaemon(protocol.device_new(link, device_seed or config.device_seed),
                                 ("127.0.0.1", 0), cfg, clock, rec)
    worker = dev.start(timeout=10)
    st = protocol.authenticator_new(account or config.account_id, link, auth_seed or config.authenticator_seed,
                                    cfg, config.start_time)
    st = transport.authenticator_register(st, srv.address, cfg, clock, rec)
    st = transport.authenticator_add_device(st, srv.address, dev.address, cfg, clock, rec)
    worker.join(10)
    if dev.error:
        raise dev.error
    return srv, rec, st, dev.state
