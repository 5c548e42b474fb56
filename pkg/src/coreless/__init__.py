"""Deterministic simulator of a coreless mobile network."""

from .capacity import (
    FronthaulParams,
    TrafficProjection,
    cpri_fronthaul_rate,
    fronthaul_to_backhaul_ratio,
    omnify_projection,
    per_user_traffic,
    soda_backhaul_rate,
)
from .engine import Engine
from .network import Network, NetworkConfig
from .runner import MetricsReport, export_report, run_scenario
from .scenario import Scenario, parse_scenario

__all__ = [
    "Engine",
    "FronthaulParams",
    "MetricsReport",
    "Network",
    "NetworkConfig",
    "Scenario",
    "TrafficProjection",
    "cpri_fronthaul_rate",
    "export_report",
    "fronthaul_to_backhaul_ratio",
    "omnify_projection",
    "parse_scenario",
    "per_user_traffic",
    "run_scenario",
    "soda_backhaul_rate",
]

__version__ = "0.1.0"
