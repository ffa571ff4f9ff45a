"""Discrete-event core: integer-nanosecond clock, store-and-forward FCFS links."""

from __future__ import annotations

import csv
import heapq
import itertools
import random
from collections import deque
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any, Callable, Optional

NS = 1_000_000_000

Addr = tuple[str, int]


class SimulationError(RuntimeError):
    pass


def serialization_ns(size: int, capacity) -> int:
    """Time in ns to clock ``size`` bytes onto a link of ``capacity`` bytes/s, rounded up."""
    cap = Fraction(capacity)
    if cap <= 0:
        raise ValueError("capacity must be positive")
    num = size * NS * cap.denominator
    return -(-num // cap.numerator)


def ms(value) -> int:
    return int(round(value * 1_000_000))


class Simulator:
    """Event queue ordered by (time, insertion sequence)."""

    def __init__(self, trace: bool = False):
        self.now = 0
        self._heap: list = []
        self._seq = itertools.count()
        self.trace: Optional[list] = [] if trace else None
        self.dispatched = 0

    def schedule_at(self, when: int, fn: Callable, *args) -> None:
        if when < self.now:
            raise SimulationError(f"event scheduled in the past ({when} < {self.now})")
        heapq.heappush(self._heap, (when, next(self._seq), fn, args))

    def schedule(self, delay: int, fn: Callable, *args) -> None:
        self.schedule_at(self.now + delay, fn, *args)

    def next_time(self) -> Optional[int]:
        return self._heap[0][0] if self._heap else None

    def run_due(self, until: int) -> None:
        """Dispatch every event with time <= ``until`` and leave the clock at ``until``."""
        heap = self._heap
        while heap and heap[0][0] <= until:
            when, _, fn, args = heapq.heappop(heap)
            self.now = when
            self.dispatched += 1
            fn(*args)
        if until > self.now:
            self.now = until

    def run(self, until: Optional[int] = None) -> None:
        heap = self._heap
        while heap and (until is None or heap[0][0] <= until):
            when, _, fn, args = heapq.heappop(heap)
            self.now = when
            self.dispatched += 1
            fn(*args)
        if until is not None and until > self.now:
            self.now = until

    def run_while(self, cond: Callable[[], bool]) -> None:
        heap = self._heap
        while heap and cond():
            when, _, fn, args = heapq.heappop(heap)
            self.now = when
            self.dispatched += 1
            fn(*args)

    def log(self, node: str, event: str, packet_id: int, size: int) -> None:
        if self.trace is not None:
            self.trace.append((self.now, node, event, packet_id, size))

    def dump_trace(self, path_or_file) -> None:
        rows = self.trace or []
        if hasattr(path_or_file, "write"):
            _write_trace(path_or_file, rows)
        else:
            with open(path_or_file, "w", newline="") as fh:
                _write_trace(fh, rows)


def _write_trace(fh, rows) -> None:
    w = csv.writer(fh)
    w.writerow(["time_ns", "node", "event", "packet_id", "size"])
    w.writerows(rows)


@dataclass
class Packet:
    pid: int
    src: Addr
    dst: Addr
    size: int
    kind: str = "udp"
    payload: Any = None
    born: int = 0


class Link:
    """Directed link fed by an unbounded (or packet-bounded) FCFS output queue."""

    def __init__(self, net: "Network", src: "Node", dst: "Node", capacity, latency_ns: int,
                 queue_limit: Optional[int] = None):
        if Fraction(capacity) <= 0:
            raise ValueError("link capacity must be positive")
        if latency_ns < 0:
            raise ValueError("link latency must be non-negative")
        self.net = net
        self.src = src
        self.dst = dst
        self.capacity = capacity
        self.latency_ns = int(latency_ns)
        self.queue_limit = queue_limit
        self.queue: deque = deque()
        self.busy = False
        self.bytes_sent = 0
        self.packets_sent = 0
        self._ser: dict[int, int] = {}

    def __repr__(self) -> str:
        return f"Link({self.src.name}->{self.dst.name}, {self.capacity} B/s, {self.latency_ns} ns)"

    def ser_ns(self, size: int) -> int:
        t = self._ser.get(size)
        if t is None:
            t = self._ser[size] = serialization_ns(size, self.capacity)
        return t

    def backlog(self) -> int:
        return len(self.queue) + (1 if self.busy else 0)

    def enqueue(self, pkt: Packet) -> None:
        sim = self.net.sim
        if self.busy:
            if self.queue_limit is not None and len(self.queue) >= self.queue_limit:
                self.net.drop(self.src, pkt, "queue-overflow")
                return
            sim.log(self.src.name, "enqueue", pkt.pid, pkt.size)
            self.queue.append(pkt)
            return
        sim.log(self.src.name, "enqueue", pkt.pid, pkt.size)
        self._transmit(pkt)

    def _transmit(self, pkt: Packet) -> None:
        sim = self.net.sim
        self.busy = True
        sim.log(self.src.name, "tx", pkt.pid, pkt.size)
        sim.schedule(self.ser_ns(pkt.size), self._finish, pkt)

    def _finish(self, pkt: Packet) -> None:
        sim = self.net.sim
        self.bytes_sent += pkt.size
        self.packets_sent += 1
        sim.log(self.src.name, "depart", pkt.pid, pkt.size)
        sim.schedule(self.latency_ns, self.dst.receive, pkt)
        if self.queue:
            self._transmit(self.queue.popleft())
        else:
            self.busy = False


class Node:
    def __init__(self, net: "Network", name: str, ip: str):
        self.net = net
        self.name = name
        self.ip = ip
        self.out: dict[str, Link] = {}
        self.ports: dict[tuple[str, int], Callable[[Packet], None]] = {}
        self.unbound: dict[str, Callable[[Packet], None]] = {}
        self.alive = True

    def __repr__(self) -> str:
        return f"Node({self.name}, {self.ip})"

    def bind(self, kind: str, port: int, handler: Callable[[Packet], None]) -> None:
        key = (kind, port)
        if key in self.ports:
            raise OSError(f"{self.name}: {kind} port {port} already in use")
        self.ports[key] = handler

    def unbind(self, kind: str, port: int) -> None:
        self.ports.pop((kind, port), None)

    def send(self, pkt: Packet) -> None:
        """Inject a locally originated packet."""
        if not self.alive:
            return
        self.net.injected_bytes += pkt.size
        self.net.sim.log(self.name, "send", pkt.pid, pkt.size)
        if pkt.dst[0] == self.ip:
            self.net.sim.schedule(self.net.loopback_ns, self.receive, pkt)
        else:
            self.forward(pkt)

    def forward(self, pkt: Packet) -> None:
        link = self.net.next_link(self, pkt.dst[0])
        if link is None:
            self.net.drop(self, pkt, "no-route")
            return
        link.enqueue(pkt)

    def receive(self, pkt: Packet) -> None:
        sim = self.net.sim
        if not self.alive:
            self.net.drop(self, pkt, "host-down")
            return
        if pkt.kind == "cross" and pkt.dst[0] == self.ip:
            sim.log(self.name, "sink", pkt.pid, pkt.size)
            self.net.sunk_bytes += pkt.size
            return
        if pkt.dst[0] != self.ip:
            sim.log(self.name, "arrive", pkt.pid, pkt.size)
            self.forward(pkt)
            return
        handler = self.ports.get((pkt.kind, pkt.dst[1]))
        if handler is None:
            handler = self.unbound.get(pkt.kind)
            if handler is None:
                self.net.drop(self, pkt, "port-unreachable")
                return
        sim.log(self.name, "deliver", pkt.pid, pkt.size)
        self.net.delivered_bytes += pkt.size
        handler(pkt)


class Network:
    """Nodes, directed links and static shortest-hop routing."""

    def __init__(self, sim: Optional[Simulator] = None, loopback_ns: int = 0):
        self.sim = sim or Simulator()
        self.nodes: dict[str, Node] = {}
        self.by_ip: dict[str, Node] = {}
        self.links: list[Link] = []
        self.loopback_ns = loopback_ns
        self._routes: dict[tuple[str, str], Optional[Link]] = {}
        self._pid = itertools.count(1)
        self.injected_bytes = 0
        self.delivered_bytes = 0
        self.dropped_bytes = 0
        self.sunk_bytes = 0
        self.drops: list[tuple[int, str, int, str]] = []

    def add_node(self, name: str, ip: Optional[str] = None) -> Node:
        if name in self.nodes:
            raise ValueError(f"duplicate node {name}")
        ip = ip or f"10.0.{len(self.nodes) // 250}.{len(self.nodes) % 250 + 1}"
        if ip in self.by_ip:
            raise ValueError(f"duplicate address {ip}")
        node = Node(self, name, ip)
        self.nodes[name] = node
        self.by_ip[ip] = node
        return node

    def node(self, name_or_ip: str) -> Node:
        return self.nodes.get(name_or_ip) or self.by_ip[name_or_ip]

    def add_link(self, a: str, b: str, capacity, latency_ns: int,
                 queue_limit: Optional[int] = None) -> Link:
        src, dst = self.nodes[a], self.nodes[b]
        if b in src.out:
            raise ValueError(f"duplicate link {a}->{b}")
        link = Link(self, src, dst, capacity, latency_ns, queue_limit)
        src.out[b] = link
        self.links.append(link)
        self._routes.clear()
        return link

    def connect(self, a: str, b: str, capacity, latency_ns: int,
                reverse_capacity=None, reverse_latency_ns: Optional[int] = None,
                queue_limit: Optional[int] = None) -> tuple[Link, Link]:
        fwd = self.add_link(a, b, capacity, latency_ns, queue_limit)
        rev = self.add_link(b, a, capacity if reverse_capacity is None else reverse_capacity,
                            latency_ns if reverse_latency_ns is None else reverse_latency_ns,
                            queue_limit)
        return fwd, rev

    def link(self, a: str, b: str) -> Link:
        return self.nodes[a].out[b]

    def new_pid(self) -> int:
        return next(self._pid)

    def next_link(self, node: Node, dst_ip: str) -> Optional[Link]:
        dst = self.by_ip.get(dst_ip)
        if dst is None:
            return None
        key = (node.name, dst.name)
        if key not in self._routes:
            self._routes[key] = self._bfs(node, dst)
        return self._routes[key]

    def _bfs(self, src: Node, dst: Node) -> Optional[Link]:
        first: dict[str, Optional[Link]] = {src.name: None}
        frontier = deque([src])
        while frontier:
            cur = frontier.popleft()
            for name, link in cur.out.items():
                if name in first:
                    continue
                first[name] = first[cur.name] or link
                if name == dst.name:
                    return first[name]
                frontier.append(link.dst)
        return None

    def drop(self, node: Node, pkt: Packet, reason: str) -> None:
        self.dropped_bytes += pkt.size
        self.drops.append((self.sim.now, node.name, pkt.pid, reason))
        self.sim.log(node.name, "drop", pkt.pid, pkt.size)

    def in_flight_bytes(self) -> int:
        return self.injected_bytes - self.delivered_bytes - self.dropped_bytes - self.sunk_bytes

    def add_cross_traffic(self, a: str, b: str, source: "CrossTrafficSource",
                          start_ns: int = 0, stop_ns: Optional[int] = None) -> None:
        """Feed ``source``'s packets into the output queue of link a->b; they leave at b."""
        source.attach(self, self.link(a, b), start_ns, stop_ns)

    def inject_cross(self, a: str, b: str, size: int, at_ns: Optional[int] = None) -> None:
        """Queue one cross packet on link a->b now or at ``at_ns``."""
        link = self.link(a, b)
        if at_ns is None:
            _emit_cross(self, link, size)
        else:
            self.sim.schedule_at(at_ns, _emit_cross, self, link, size)


def _emit_cross(net: Network, link: Link, size: int) -> None:
    pkt = Packet(net.new_pid(), (link.src.ip, 0), (link.dst.ip, 0), size, "cross", None,
                 net.sim.now)
    net.injected_bytes += pkt.size
    net.sim.log(link.src.name, "cross", pkt.pid, pkt.size)
    link.enqueue(pkt)


@dataclass
class CrossTrafficSource:
    """Competing traffic entering one output queue and leaving after one hop."""

    mode: str = "off"  # off | interval | poisson
    packet_size: int = 600
    rate: float = 0.0  # packets per second
    seed: int = 0
    emitted: int = field(default=0, init=False)

    def __post_init__(self):
        if self.mode not in ("off", "interval", "poisson"):
            raise ValueError(f"unknown cross-traffic mode {self.mode!r}")
        if self.mode != "off" and self.rate <= 0:
            raise ValueError("cross-traffic rate must be positive")

    def attach(self, net: Network, link: Link, start_ns: int, stop_ns: Optional[int]) -> None:
        if self.mode == "off":
            return
        rng = random.Random(self.seed)
        if self.mode == "interval":
            gap = max(1, round(NS / self.rate))
            next_gap = lambda: gap  # noqa: E731
        else:
            next_gap = lambda: max(1, round(rng.expovariate(self.rate) * NS))  # noqa: E731

        def fire():
            if stop_ns is not None and net.sim.now >= stop_ns:
                return
            self.emitted += 1
            _emit_cross(net, link, self.packet_size)
            net.sim.schedule(next_gap(), fire)

        net.sim.schedule_at(max(start_ns, net.sim.now) + next_gap(), fire)

