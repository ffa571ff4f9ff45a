"""Packet-pair path capacity estimation with min-filtering.

Each measurement step has four stages, all echoed with an S-byte reply:

1. one S-byte request                     -> round trip T1
2. one factor*S request                   -> T2
3. two back-to-back S-byte requests       -> T3
4. two back-to-back factor*S requests     -> T4

Minima over all complete steps give the bottleneck capacity
``S / (T4 + T1 - T3 - T2)`` (factor 2) and its queueing delay
``2*T3 + T2 - 2*T1 - T4``.
"""

from __future__ import annotations

import asyncio
import logging
import random
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional

from . import wire
from .wire import BwPacket, BwType

log = logging.getLogger(__name__)

NS = 1_000_000_000


class MeasurementError(Exception):
    pass


class DegenerateDenominator(MeasurementError):
    """Pair dispersion difference is not positive; no capacity can be derived."""


class MeasurementFailed(MeasurementError):
    def __init__(self, message: str, *, degenerate: bool = False,
                 stage_times: Optional["StageTimes"] = None):
        super().__init__(message)
        self.degenerate = degenerate
        self.stage_times = stage_times


@dataclass(frozen=True)
class MeasurementConfig:
    base_payload_size: int = 600
    steps: int = 3
    multiplication_factor: int = 2
    step_timeout: float = 2.0
    max_adaptive_rounds: int = 10
    rng_seed: int = 0

    def __post_init__(self):
        if self.base_payload_size < 1:
            raise ValueError("base payload size must be at least 1 byte")
        if self.steps < 1:
            raise ValueError("at least one step is required")
        if not 2 <= self.multiplication_factor <= 255:
            raise ValueError("multiplication factor must be in 2..255")
        if self.step_timeout <= 0:
            raise ValueError("step timeout must be positive")
        if self.max_adaptive_rounds < 0:
            raise ValueError("adaptive rounds cannot be negative")


@dataclass(frozen=True)
class StageTimes:
    """Round trips (ns) of the four stages of one step, or their minima."""

    t1: int
    t2: int
    t3: int
    t4: int

    def as_tuple(self) -> tuple[int, int, int, int]:
        return (self.t1, self.t2, self.t3, self.t4)

    @classmethod
    def minima(cls, steps) -> "StageTimes":
        steps = list(steps)
        if not steps:
            raise ValueError("no complete steps")
        return cls(min(s.t1 for s in steps), min(s.t2 for s in steps),
                   min(s.t3 for s in steps), min(s.t4 for s in steps))


@dataclass(frozen=True)
class MeasurementResult:
    times: StageTimes
    capacity: float  # bytes per second
    queue_delay_ns: int
    sane: bool
    steps_used: int
    rounds: int = 1
    samples: tuple[StageTimes, ...] = field(default=(), repr=False)

    @property
    def capacity_bps(self) -> float:
        return self.capacity * 8


def compute_capacity(t1, t2, t3, t4, size, *, factor: int = 2, time_unit: float = 1.0) -> float:
    """Bottleneck capacity in bytes per second.

    Times are in units of ``time_unit`` seconds.  For ``factor`` other than 2
    the large probes carry ``factor - 1`` extra base payloads, so the
    effective size grows accordingly.
    """
    denom = t4 + t1 - t3 - t2
    if denom <= 0:
        raise DegenerateDenominator(f"T4 + T1 - T3 - T2 = {denom} is not positive")
    return (factor - 1) * size / denom / time_unit


def compute_queue_delay(t1, t2, t3, t4, *, factor: int = 2):
    """Queueing delay at the bottleneck, in the unit of the inputs; may be negative."""
    if factor == 2:
        return 2 * t3 + t2 - 2 * t1 - t4
    return (factor * (t3 - t1) - (t4 - t2)) / (factor - 1)


def sanity_check(t1, t2, t3, t4, *, factor: int = 2) -> bool:
    small = t3 - t1
    large = t4 - t2
    return 0 < large - small and small <= large and large <= factor * small


# --------------------------------------------------------------------------
# initiator
# --------------------------------------------------------------------------


class _Initiator:
    def __init__(self, net, endpoint, peer, config: MeasurementConfig):
        self.net = net
        self.ep = endpoint
        self.peer = peer
        self.cfg = config
        rng = random.Random(config.rng_seed)
        self.token = rng.getrandbits(32)
        self.payload = rng.randbytes(config.multiplication_factor * config.base_payload_size)
        self.seq = 0
        self.timeout_ns = int(config.step_timeout * NS)

    def _request(self, ptype: int, factor: int, seq: int, send_time: int) -> bytes:
        size = self.cfg.base_payload_size
        return wire.encode(BwPacket(ptype, self.token, self.ep.port, seq,
                                    (send_time // 1000) & 0xFFFFFFFFFFFFFFFF, factor, size,
                                    self.payload[: factor * size]))

    async def _await_reply(self, want_type: int, seq: Optional[int], deadline: int) -> bool:
        while True:
            remaining = deadline - self.net.clock_ns()
            if remaining <= 0:
                return False
            try:
                data, _ = await asyncio.wait_for(self.ep.recv(), remaining / NS)
            except asyncio.TimeoutError:
                return False
            try:
                pkt = wire.decode(data, wire.BANDWIDTH)
            except wire.WireError:
                continue
            if pkt.packet_type == want_type and pkt.token == self.token and (
                    seq is None or pkt.sequence == seq):
                return True

    async def breakthrough(self) -> None:
        pkt = wire.encode(BwPacket(BwType.BREAKTHROUGH_REQUEST, self.token, self.ep.port))
        for _ in range(self.cfg.steps):
            start = self.net.clock_ns()
            self.ep.send(pkt, self.peer)
            if await self._await_reply(BwType.BREAKTHROUGH_REPLY, None, start + self.timeout_ns):
                return
        raise MeasurementFailed(f"no breakthrough reply from {self.peer[0]}:{self.peer[1]}")

    async def _stage(self, pair: bool, factor: int) -> Optional[int]:
        self.seq = (self.seq + 1) & 0xFFFFFFFF
        seq = self.seq
        start = self.net.clock_ns()
        if pair:
            first = self._request(BwType.PAIR_FIRST, factor, seq, start)
            second = self._request(BwType.PAIR_SECOND, factor, seq, start)
            self.ep.send(first, self.peer)
            self.ep.send(second, self.peer)
        else:
            self.ep.send(self._request(BwType.MEASUREMENT_REQUEST, factor, seq, start), self.peer)
        if not await self._await_reply(BwType.MEASUREMENT_REPLY, seq, start + self.timeout_ns):
            return None
        return self.net.clock_ns() - start

    async def step(self) -> Optional[StageTimes]:
        big = self.cfg.multiplication_factor
        times = []
        for pair, factor in ((False, 1), (False, big), (True, 1), (True, big)):
            rtt = await self._stage(pair, factor)
            if rtt is None:
                return None
            times.append(rtt)
        return StageTimes(*times)

    async def run(self) -> MeasurementResult:
        cfg = self.cfg
        await self.breakthrough()
        samples: list[StageTimes] = []
        rounds = 0
        mins = None
        while rounds <= cfg.max_adaptive_rounds:
            rounds += 1
            for _ in range(cfg.steps):
                s = await self.step()
                if s is None:
                    log.debug("step to %s lost, discarded", self.peer)
                else:
                    samples.append(s)
            if not samples:
                raise MeasurementFailed(f"every step to {self.peer[0]}:{self.peer[1]} timed out")
            mins = StageTimes.minima(samples)
            if sanity_check(*mins.as_tuple(), factor=cfg.multiplication_factor):
                break
            log.debug("insane minima %s after %d rounds", mins, rounds)
        try:
            capacity = compute_capacity(*mins.as_tuple(), cfg.base_payload_size,
                                        factor=cfg.multiplication_factor, time_unit=1e-9)
        except DegenerateDenominator as exc:
            raise MeasurementFailed(str(exc), degenerate=True, stage_times=mins) from exc
        sane = sanity_check(*mins.as_tuple(), factor=cfg.multiplication_factor)
        q = compute_queue_delay(*mins.as_tuple(), factor=cfg.multiplication_factor)
        if q < 0:
            q, sane = 0, False
        return MeasurementResult(mins, capacity, int(q), sane, len(samples), rounds,
                                 tuple(samples))


async def run_initiator(net, peer, config: MeasurementConfig = MeasurementConfig(),
                        endpoint=None) -> MeasurementResult:
    """Measure the capacity of the path from ``net`` to the responder at ``peer``."""
    own = endpoint is None
    ep = endpoint if endpoint is not None else await net.open_datagram(0)
    try:
        return await _Initiator(net, ep, tuple(peer), config).run()
    finally:
        if own:
            ep.close()


# --------------------------------------------------------------------------
# responder
# --------------------------------------------------------------------------


class Responder:
    """Stateless-ish echo logic; keeps a short memory of pair first-halves."""

    def __init__(self, port: int, memory: int = 256):
        self.port = port
        self._pending: OrderedDict = OrderedDict()
        self._memory = memory

    def respond(self, data: bytes, src) -> Optional[tuple[bytes, tuple]]:
        try:
            pkt = wire.decode(data, wire.BANDWIDTH)
        except wire.WireError as exc:
            log.debug("ignoring malformed bandwidth packet from %s: %s", src, exc)
            return None
        dest = (src[0], pkt.peer_port)
        if pkt.packet_type == BwType.BREAKTHROUGH_REQUEST:
            return wire.encode(BwPacket(BwType.BREAKTHROUGH_REPLY, pkt.token, self.port)), dest
        if pkt.packet_type == BwType.MEASUREMENT_REQUEST:
            return self._echo(pkt), dest
        key = (src[0], pkt.token, pkt.sequence)
        if pkt.packet_type == BwType.PAIR_FIRST:
            self._pending[key] = True
            while len(self._pending) > self._memory:
                self._pending.popitem(last=False)
            return None
        if pkt.packet_type == BwType.PAIR_SECOND and self._pending.pop(key, False):
            return self._echo(pkt), dest
        return None

    def _echo(self, pkt: BwPacket) -> bytes:
        base = pkt.base_payload_size
        body = pkt.payload[:base]
        body += bytes(base - len(body))
        return wire.encode(BwPacket(BwType.MEASUREMENT_REPLY, pkt.token, self.port, pkt.sequence,
                                    pkt.send_time, pkt.multiplication_factor, base, body))


async def serve_responder(endpoint) -> None:
    responder = Responder(endpoint.port)
    while True:
        try:
            data, src = await endpoint.recv()
        except OSError:
            return
        reply = responder.respond(data, src)
        if reply is not None and not endpoint.closed:
            endpoint.send(*reply)


async def run_responder(net, listen_port: int = 0, started: Optional[asyncio.Future] = None):
    """Answer bandwidth probes on ``listen_port`` until cancelled."""
    ep = await net.open_datagram(listen_port)
    if started is not None and not started.done():
        started.set_result(ep.port)
    try:
        await serve_responder(ep)
    finally:
        ep.close()
