"""Linear measurement paths P1..P(n+1) and the oracles defined on them."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from . import kernel
from .engine import CrossTrafficSource, Network, Packet, Simulator, serialization_ns


@dataclass(frozen=True)
class SimLink:
    capacity: float  # bytes per second
    latency_ns: int = 0

    def __post_init__(self):
        if Fraction(self.capacity) <= 0:
            raise ValueError("capacity must be positive")
        if self.latency_ns < 0:
            raise ValueError("latency must be non-negative")

    @classmethod
    def bps(cls, bits_per_second, latency_ms: float = 0.0) -> "SimLink":
        return cls(Fraction(bits_per_second) / 8, int(round(latency_ms * 1_000_000)))


@dataclass
class SimPath:
    """Forward links P1->P(n+1); ``reverse`` defaults to the mirror image."""

    links: list[SimLink]
    reverse: Optional[list[SimLink]] = None
    cross: dict[int, CrossTrafficSource] = field(default_factory=dict)
    queue_limit: Optional[int] = None

    def __post_init__(self):
        if not self.links:
            raise ValueError("a path needs at least one link")
        if self.reverse is not None and len(self.reverse) != len(self.links):
            raise ValueError("reverse path must have the same hop count")

    @property
    def hops(self) -> int:
        return len(self.links)

    def reverse_links(self) -> list[SimLink]:
        """Reverse link i connects P(i+2) -> P(i+1), indexed like ``links``."""
        return list(self.reverse) if self.reverse is not None else list(self.links)

    def node_names(self) -> list[str]:
        return [f"P{i + 1}" for i in range(self.hops + 1)]

    def build(self, sim: Optional[Simulator] = None, trace: bool = False) -> Network:
        net = Network(sim or Simulator(trace=trace))
        names = self.node_names()
        for name in names:
            net.add_node(name)
        for i, (fwd, rev) in enumerate(zip(self.links, self.reverse_links())):
            net.connect(names[i], names[i + 1], fwd.capacity, fwd.latency_ns,
                        rev.capacity, rev.latency_ns, self.queue_limit)
        for i, src in sorted(self.cross.items()):
            net.add_cross_traffic(names[i], names[i + 1], src)
        return net


def path_capacity(path) -> float:
    """Capacity of the slowest forward link (bytes/s)."""
    links = path.links if isinstance(path, SimPath) else list(path)
    if not links:
        raise ValueError("empty path has no capacity")
    return min(link.capacity for link in links)


def _as_path(path) -> SimPath:
    return path if isinstance(path, SimPath) else SimPath(list(path))


def _send_train(net: Network, sizes: Sequence[int], src: str, dst: str) -> list[int]:
    a, b = net.nodes[src], net.nodes[dst]
    arrivals: dict[int, int] = {}
    b.bind("udp", 9, lambda pkt: arrivals.__setitem__(pkt.payload, net.sim.now))
    for j, size in enumerate(sizes):
        a.send(Packet(net.new_pid(), (a.ip, 9), (b.ip, 9), size, "udp", j, net.sim.now))
    net.sim.run_while(lambda: len(arrivals) < len(sizes))
    b.unbind("udp", 9)
    return [arrivals[j] for j in range(len(sizes))]


def transit_time(path, size: int) -> int:
    """One-way time in ns of a single packet on an otherwise idle path."""
    p = _as_path(path)
    net = SimPath(p.links, p.reverse).build()
    names = p.node_names()
    return _send_train(net, [size], names[0], names[-1])[0]


def pair_dispersion(path, size: int, net: Optional[Network] = None) -> int:
    """Arrival spacing in ns at P(n+1) of two back-to-back ``size``-byte packets."""
    p = _as_path(path)
    net = net or p.build()
    names = p.node_names()
    first, second = _send_train(net, [size, size], names[0], names[-1])
    return second - first


def train_arrivals(path, sizes: Sequence[int], holds_ns: Optional[Sequence[int]] = None,
                   start_ns: int = 0) -> np.ndarray:
    """Analytic arrival times at every node of a back-to-back train (kernel route)."""
    p = _as_path(path)
    ser = np.array([[serialization_ns(s, link.capacity) for s in sizes] for link in p.links],
                   dtype=np.int64)
    lat = np.array([link.latency_ns for link in p.links], dtype=np.int64)
    hold = np.zeros(p.hops, dtype=np.int64) if holds_ns is None else np.asarray(holds_ns, np.int64)
    inject = np.full(len(sizes), start_ns, dtype=np.int64)
    return kernel.propagate(inject, ser, lat, hold)


def predicted_dispersion(path, size: int, holds_ns: Optional[Sequence[int]] = None) -> int:
    """Max over links of (q_k + S/c_k) in ns -- the packet-pair prediction."""
    p = _as_path(path)
    holds = list(holds_ns) if holds_ns is not None else [0] * p.hops
    return max(q + serialization_ns(size, link.capacity) for q, link in zip(holds, p.links))


@dataclass(frozen=True)
class StageProbe:
    forward_ns: int
    backward_ns: int

    @property
    def rtt_ns(self) -> int:
        return self.forward_ns + self.backward_ns


def probe_stages(path: SimPath, size: int, factor: int = 2) -> list[StageProbe]:
    """Run the four probing stages with bare ``size``-byte probes on an idle path.

    Stage 1 sends one S packet, stage 2 one factor*S packet, stages 3 and 4
    send back-to-back pairs of those sizes.  The echo is always S bytes and
    leaves as soon as the last request packet arrives.
    """
    net = path.build()
    names = path.node_names()
    out = []
    for sizes in ([size], [factor * size], [size, size], [factor * size, factor * size]):
        sent = net.sim.now
        arrived = _send_train(net, sizes, names[0], names[-1])[-1]
        back = _send_train(net, [size], names[-1], names[0])[0]
        out.append(StageProbe(arrived - sent, back - arrived))
    return out
