"""ASOP: application-layer onboarding of IoT devices to a cloud server,
mediated by the owner's authenticator."""

from .errors import AuthenticationError, CryptoError, ErrorCode, ProtocolError, StoreCorrupt
from .sim import SimConfig, Simulation, Verdict, run_happy_path, run_scenario

__all__ = [
    "AuthenticationError", "CryptoError", "ErrorCode", "ProtocolError", "StoreCorrupt",
    "SimConfig", "Simulation", "Verdict", "run_happy_path", "run_scenario",
]
__version__ = "0.1.0"
