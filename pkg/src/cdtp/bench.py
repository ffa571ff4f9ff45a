"""Chained versus direct download experiments on a shared slow uplink."""

from __future__ import annotations

import asyncio
import csv
import hashlib
import io
import logging
import random
import tempfile
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional

from .bandwidth import MeasurementConfig
from .client import Client, ClientConfig, ClientError
from .server import Server, ServerConfig
from .simnet import Network, ms
from .simnet.aio import Simulation
from .transport import AsyncioNet

log = logging.getLogger(__name__)

COLUMNS = ["client", "server_speed_kbps", "file_size", "cdtp_time_s", "ftp_time_s",
           "cdtp_rate_bps", "ftp_rate_bps", "cdtp_egress_bytes", "ftp_egress_bytes",
           "cdtp_bw_overhead_s", "ftp_bw_overhead_s"]


@dataclass(frozen=True)
class ExperimentSpec:
    topology: str = "simnet"  # simnet | loopback
    server_bps: int = 120000
    client_bps: int = 100_000_000
    server_latency_ms: float = 1.0
    client_latency_ms: float = 0.1
    file_size: int = 561282
    clients: int = 3
    stagger: float = 5.0
    mode: str = "cdtp"
    seed: int = 0
    chunk_size: int = 8192
    measurement: MeasurementConfig = MeasurementConfig()
    time_limit_s: float = 3600.0
    kill: Optional[tuple] = None  # (client index, fraction of file) for fault injection

    def __post_init__(self):
        if self.topology not in ("simnet", "loopback"):
            raise ValueError(f"unknown topology {self.topology!r}")
        if self.mode not in ("cdtp", "ftp-baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.stagger < 0:
            raise ValueError("stagger must be non-negative")
        if self.clients < 1 or self.file_size < 0:
            raise ValueError("need at least one client and a non-negative file size")


@dataclass
class ClientResult:
    index: int
    start_s: float
    time_s: Optional[float]
    ok: bool
    recoveries: int = 0
    killed: bool = False
    error: str = ""

    def rate_bps(self, file_size: int) -> Optional[float]:
        if not self.ok or not self.time_s:
            return None
        return file_size * 8 / self.time_s


@dataclass
class ExperimentReport:
    spec: ExperimentSpec
    clients: list = field(default_factory=list)
    egress_data_bytes: int = 0
    egress_total_bytes: int = 0
    bw_overhead_s: float = 0.0
    failed: bool = False
    digest: str = ""

    def rates(self) -> list:
        return [c.rate_bps(self.spec.file_size) for c in self.clients]

    def times(self) -> list:
        return [c.time_s for c in self.clients]


def make_file(size: int, seed: int) -> bytes:
    return random.Random(seed).randbytes(size)


async def _client_run(net, spec: ExperimentSpec, server_addr, index: int, origin: bytes,
                      clock, result: ClientResult, on_progress=None) -> Optional[Client]:
    await asyncio.sleep(spec.stagger * index)
    result.start_s = clock()
    cfg = ClientConfig(server=server_addr, chunk_size=spec.chunk_size,
                       measurement=replace(spec.measurement, rng_seed=spec.seed * 31 + index))
    client = Client(net, cfg, on_progress=on_progress)
    try:
        await client.start()
        data = await client.get("file.bin")
        result.time_s = clock() - result.start_s
        result.ok = data == origin
        if not result.ok:
            result.error = "content mismatch"
    except (ClientError, OSError) as exc:
        result.error = str(exc)
    if client.download is not None:
        result.recoveries = client.download.recoveries
    return client


async def _experiment(spec: ExperimentSpec, server_net, client_nets, clock, origin: bytes,
                      root: str, kill_hook=None) -> ExperimentReport:
    scfg = ServerConfig(root=root, port=0 if spec.topology == "loopback" else 6000,
                        mode=spec.mode, seed=spec.seed,
                        measurement=replace(spec.measurement, rng_seed=spec.seed))
    server = await Server(server_net, scfg).start()
    addr = (server_net.ip, server.port)
    results = [ClientResult(i, 0.0, None, False) for i in range(spec.clients)]
    tasks = []
    for i, net in enumerate(client_nets):
        hook = kill_hook(i, results[i]) if kill_hook else None
        tasks.append(asyncio.ensure_future(
            _client_run(net, spec, addr, i, origin, clock, results[i], hook)))
    clients = await asyncio.gather(*tasks)
    for c, r in zip(clients, results):
        if c is not None and not r.killed:
            try:
                await asyncio.wait_for(c.wait_serving_done(), 60)
            except asyncio.TimeoutError:
                pass
    await asyncio.sleep(0.5)
    report = ExperimentReport(spec, results, server.stats.data_bytes, server_net.sent_bytes,
                              server.stats.measurement_ns / 1e9)
    report.failed = not all(r.ok or r.killed for r in results)
    for c, r in zip(clients, results):
        if c is not None and not r.killed:
            await c.close()
    await server.close()
    return report


def run_simnet(spec: ExperimentSpec) -> ExperimentReport:
    net = Network()
    net.add_node("S")
    net.add_node("R")
    net.connect("S", "R", Fraction(spec.server_bps) / 8, ms(spec.server_latency_ms))
    names = [f"C{i + 1}" for i in range(spec.clients)]
    for name in names:
        net.add_node(name)
        net.connect("R", name, Fraction(spec.client_bps) / 8, ms(spec.client_latency_ms))
    origin = make_file(spec.file_size, spec.seed)
    sim = Simulation(net, time_limit_s=spec.time_limit_s)
    hosts = [sim.host(n) for n in names]

    def kill_hook(i, result):
        if spec.kill is None or spec.kill[0] != i:
            return None
        threshold = int(spec.kill[1] * spec.file_size)

        def hook(state):
            if not result.killed and state.bytes_received >= threshold:
                result.killed = True
                hosts[i].kill()
        return hook

    with tempfile.TemporaryDirectory() as root:
        Path(root, "file.bin").write_bytes(origin)
        try:
            report = sim.run(_experiment(spec, sim.host("S"), hosts, lambda: sim.now, origin,
                                         root, kill_hook))
        finally:
            sim.close()
    report.digest = hashlib.sha256(origin).hexdigest()
    return report


def run_loopback(spec: ExperimentSpec) -> ExperimentReport:
    origin = make_file(spec.file_size, spec.seed)
    server_net = AsyncioNet(egress_rate=spec.server_bps / 8)
    client_nets = [AsyncioNet() for _ in range(spec.clients)]

    async def main(root):
        loop = asyncio.get_running_loop()
        t0 = loop.time()
        return await _experiment(spec, server_net, client_nets, lambda: loop.time() - t0,
                                 origin, root)

    with tempfile.TemporaryDirectory() as root:
        Path(root, "file.bin").write_bytes(origin)
        report = asyncio.run(main(root))
    report.digest = hashlib.sha256(origin).hexdigest()
    return report


def run_experiment(spec: ExperimentSpec) -> ExperimentReport:
    if spec.topology == "simnet":
        return run_simnet(spec)
    return run_loopback(spec)


def run_both(spec: ExperimentSpec) -> tuple[ExperimentReport, ExperimentReport]:
    return (run_experiment(replace(spec, mode="cdtp")),
            run_experiment(replace(spec, mode="ftp-baseline")))


def _fmt(value, digits=3):
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def csv_rows(cdtp: ExperimentReport, ftp: ExperimentReport) -> list[dict]:
    spec = cdtp.spec
    rows = []
    for c, f in zip(cdtp.clients, ftp.clients):
        rows.append({
            "client": c.index + 1,
            "server_speed_kbps": _fmt(spec.server_bps / 1000, 1),
            "file_size": spec.file_size,
            "cdtp_time_s": _fmt(c.time_s),
            "ftp_time_s": _fmt(f.time_s),
            "cdtp_rate_bps": _fmt(c.rate_bps(spec.file_size), 0),
            "ftp_rate_bps": _fmt(f.rate_bps(spec.file_size), 0),
            "cdtp_egress_bytes": cdtp.egress_data_bytes,
            "ftp_egress_bytes": ftp.egress_data_bytes,
            "cdtp_bw_overhead_s": _fmt(cdtp.bw_overhead_s),
            "ftp_bw_overhead_s": _fmt(ftp.bw_overhead_s),
        })
    return rows


def to_csv(cdtp: ExperimentReport, ftp: ExperimentReport) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, COLUMNS, lineterminator="\n")
    w.writeheader()
    w.writerows(csv_rows(cdtp, ftp))
    return buf.getvalue()


__all__ = ["ExperimentSpec", "ExperimentReport", "ClientResult", "COLUMNS", "run_experiment",
           "run_both", "run_simnet", "run_loopback", "to_csv", "csv_rows", "make_file"]
