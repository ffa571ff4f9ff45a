"""Deterministic discrete-event network simulator."""

from .engine import (NS, CrossTrafficSource, Link, Network, Node, Packet, SimulationError,
                     Simulator, ms, serialization_ns)
from .paths import (SimLink, SimPath, StageProbe, pair_dispersion, path_capacity, probe_stages,
                    predicted_dispersion, train_arrivals, transit_time)

__all__ = [
    "NS", "CrossTrafficSource", "Link", "Network", "Node", "Packet", "SimulationError",
    "Simulator", "ms", "serialization_ns", "SimLink", "SimPath", "StageProbe",
    "pair_dispersion", "path_capacity", "probe_stages", "predicted_dispersion",
    "train_arrivals", "transit_time",
]
