"""Discrete-event simulation of a settling router network."""

from harpia.netsim.config import (
    BEHAVIOR_KINDS,
    ConfigError,
    FreeRider,
    Flow,
    Honest,
    ReportForger,
    SimConfig,
    Spoofer,
    StpCheater,
    config_from_dict,
    generate_edges,
    load_scenario,
)
from harpia.netsim.engine import Simulation, derive_keypair, run
from harpia.netsim.metrics import CycleSummary, Metrics, RouterRow

__all__ = [
    "BEHAVIOR_KINDS", "ConfigError", "CycleSummary", "Flow", "FreeRider", "Honest", "Metrics",
    "ReportForger", "RouterRow", "SimConfig", "Simulation", "Spoofer", "StpCheater",
    "config_from_dict", "derive_keypair", "generate_edges", "load_scenario", "run",
]
