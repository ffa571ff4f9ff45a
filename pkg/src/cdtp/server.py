"""CDTP server: query sessions, chain bookkeeping and head feeding.

:class:`Registry` is the whole control-plane state as a synchronous state
machine, so it can be fuzzed and checked without any I/O.  :class:`Server`
wraps it with the UDP control port, the TCP head-transfer port and the
bandwidth measurements that gate chain selection.
"""

from __future__ import annotations

import asyncio
import configparser
import logging
import posixpath
import random
import time
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

from . import wire
from .bandwidth import MeasurementConfig, MeasurementError, run_initiator
from .wire import DenyReason

log = logging.getLogger(__name__)

SERVER = 0  # upstream marker for chain heads fed by the server
MAX_CHUNK = 65536


@dataclass(frozen=True)
class ServerConfig:
    root: str = "."
    port: int = wire.SERVER_PORT
    progress_fraction: float = 0.5
    bw_tolerance: float = 0.25
    max_chunk_size: int = MAX_CHUNK
    query_timeout: float = 120.0
    reply_cache_s: float = 10.0
    measurement: MeasurementConfig = MeasurementConfig()
    mode: str = "cdtp"
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.progress_fraction <= 1:
            raise ValueError("progress fraction must be in (0, 1]")
        if not 0 <= self.bw_tolerance < 1:
            raise ValueError("bandwidth tolerance must be in [0, 1)")
        if not 1 <= self.max_chunk_size <= 0xFFFFFFFF:
            raise ValueError("max chunk size out of range")
        if self.mode not in ("cdtp", "ftp-baseline"):
            raise ValueError(f"unknown mode {self.mode!r}")

    @classmethod
    def from_file(cls, path, **overrides) -> "ServerConfig":
        """Read an INI file with ``[server]`` and optional ``[measurement]`` sections."""
        cp = configparser.ConfigParser()
        if not cp.read(path):
            raise FileNotFoundError(path)
        kw = {}
        if cp.has_section("server"):
            s = cp["server"]
            for key, conv in (("root", str), ("port", int), ("progress_fraction", float),
                              ("bw_tolerance", float), ("max_chunk_size", int),
                              ("query_timeout", float), ("mode", str), ("seed", int)):
                if key in s:
                    kw[key] = conv(s[key])
        if cp.has_section("measurement"):
            m = cp["measurement"]
            mkw = {}
            for key, conv in (("base_payload_size", int), ("steps", int),
                              ("multiplication_factor", int), ("step_timeout", float),
                              ("max_adaptive_rounds", int), ("rng_seed", int)):
                if key in m:
                    mkw[key] = conv(m[key])
            kw["measurement"] = MeasurementConfig(**mkw)
        kw.update(overrides)
        return cls(**kw)


# --------------------------------------------------------------------------
# session records
# --------------------------------------------------------------------------


@dataclass
class QuerySession:
    handle: int
    ip: str
    query_port: int
    transfer_port: int
    control_port: int
    bw_port: int
    cwd: str = "/"
    last_active: float = 0.0
    transfers: set = field(default_factory=set)


@dataclass
class TransferSession:
    tid: int
    query: int
    file: str
    size: int
    client_bw: int
    chain: int = 0
    bytes_received: int = 0
    upstream: Optional[int] = SERVER  # SERVER, a transfer id, or None once it left
    downstream: Optional[int] = None
    service_token: int = 0  # what this client's own downstream must present
    blocked: bool = False  # no new client may be appended behind this one


@dataclass
class ChainSession:
    chain_id: int
    file: str
    bandwidth: int  # bits/second, fixed at creation
    members: list = field(default_factory=list)
    tail_progress: int = 0
    closed: bool = False


@dataclass
class FileSession:
    path: str
    size: int
    chains: list = field(default_factory=list)


@dataclass(frozen=True)
class Feeder:
    """Where a client should fetch from: the server's head slot or another client."""

    ip: str
    port: int
    token: int
    is_server: bool


class InvariantError(AssertionError):
    pass


class Registry:
    def __init__(self, config: ServerConfig = ServerConfig(), server_addr=("0.0.0.0", 6000),
                 clock=time.monotonic):
        self.config = config
        self.server_addr = server_addr
        self.clock = clock
        self._rng = random.Random(config.seed)
        self._live_ids: set[int] = set()
        self.queries: dict[int, QuerySession] = {}
        self.transfers: dict[int, TransferSession] = {}
        self.chains: dict[int, ChainSession] = {}
        self.files: dict[str, FileSession] = {}
        self.head_slots: dict[int, int] = {}  # token -> transfer id
        self.events: list[tuple] = []

    # -- ids ----------------------------------------------------------------

    def new_id(self) -> int:
        while True:
            value = self._rng.getrandbits(32)
            if value and value not in self._live_ids:
                self._live_ids.add(value)
                return value

    def _free_id(self, value: int) -> None:
        self._live_ids.discard(value)

    def _event(self, kind: str, **detail) -> None:
        self.events.append((kind, detail))
        log.debug("%s %s", kind, detail)

    # -- query sessions -----------------------------------------------------

    def open_query(self, ip: str, req: wire.StartQuerySessionRequest) -> QuerySession:
        qs = QuerySession(self.new_id(), ip, req.query_port, req.transfer_port,
                          req.control_port, req.bw_peer2_port, last_active=self.clock())
        self.queries[qs.handle] = qs
        self._event("query-open", handle=qs.handle, ip=ip)
        return qs

    def query(self, handle: int) -> Optional[QuerySession]:
        qs = self.queries.get(handle)
        if qs is not None:
            qs.last_active = self.clock()
        return qs

    def close_query(self, handle: int) -> bool:
        qs = self.queries.pop(handle, None)
        if qs is None:
            return False
        for tid in list(qs.transfers):
            self._remove_transfer(self.transfers[tid])
        self._free_id(handle)
        self._event("query-close", handle=handle)
        return True

    def expire_idle(self, now: Optional[float] = None) -> list[int]:
        now = self.clock() if now is None else now
        stale = [h for h, qs in self.queries.items()
                 if now - qs.last_active > self.config.query_timeout]
        for h in stale:
            self.close_query(h)
        return stale

    def _touch(self, ts: TransferSession) -> None:
        qs = self.queries.get(ts.query)
        if qs is not None:
            qs.last_active = self.clock()

    # -- chain selection ----------------------------------------------------

    def select_chain(self, file: str, client_bw: float, client_progress: int,
                     exclude=()) -> Optional[ChainSession]:
        if self.config.mode == "ftp-baseline":
            return None
        fs = self.files.get(file)
        if fs is None:
            return None
        limit = self.config.progress_fraction * fs.size
        best, best_key = None, None
        for cid in fs.chains:
            chain = self.chains[cid]
            if chain.closed or cid in exclude:
                continue
            if self.transfers[chain.members[-1]].blocked:
                continue
            if abs(chain.bandwidth - client_bw) > self.config.bw_tolerance * chain.bandwidth:
                continue
            ahead = chain.tail_progress - client_progress
            if ahead < 0 or ahead > limit:
                continue
            key = (ahead, cid)
            if best_key is None or key < best_key:
                best, best_key = chain, key
        return best

    def _feeder_for(self, tail: TransferSession) -> Feeder:
        qs = self.queries[tail.query]
        return Feeder(qs.ip, qs.transfer_port, tail.service_token, False)

    def _new_chain(self, members: list[TransferSession], bandwidth: int,
                   closed: bool = False) -> Feeder:
        head = members[0]
        fs = self.files.get(head.file)
        if fs is None:
            fs = self.files[head.file] = FileSession(head.file, head.size)
            self._event("file-open", file=head.file)
        chain = ChainSession(self.new_id(), head.file, int(bandwidth),
                             [m.tid for m in members], members[-1].bytes_received, closed)
        self.chains[chain.chain_id] = chain
        fs.chains.append(chain.chain_id)
        for m in members:
            m.chain = chain.chain_id
        token = self.new_id()
        self.head_slots[token] = head.tid
        head.upstream = SERVER
        head.service_token = token
        self._event("chain-open", chain=chain.chain_id, head=head.tid, bw=chain.bandwidth)
        return Feeder(self.server_addr[0], self.server_addr[1], token, True)

    def _append(self, chain: ChainSession, members: list[TransferSession]) -> Feeder:
        tail = self.transfers[chain.members[-1]]
        first = members[0]
        tail.downstream = first.tid
        first.upstream = tail.tid
        first.service_token = tail.service_token
        for m in members:
            m.chain = chain.chain_id
        chain.members.extend(m.tid for m in members)
        chain.tail_progress = members[-1].bytes_received
        self._event("chain-append", chain=chain.chain_id, after=tail.tid, tid=first.tid)
        return self._feeder_for(tail)

    # -- transitions --------------------------------------------------------

    def join(self, qs: QuerySession, file: str, size: int, client_bw: int):
        """Register a new download; returns (transfer session, feeder)."""
        ts = TransferSession(self.new_id(), qs.handle, file, size, int(client_bw))
        self.transfers[ts.tid] = ts
        qs.transfers.add(ts.tid)
        chain = self.select_chain(file, client_bw, 0)
        if chain is None:
            feeder = self._new_chain([ts], client_bw)
        else:
            feeder = self._append(chain, [ts])
        return ts, feeder

    def progress(self, tid: int, value: int) -> bool:
        ts = self.transfers.get(tid)
        if ts is None:
            log.debug("progress for unknown transfer %d", tid)
            return False
        self._touch(ts)
        value = min(value, ts.size)
        if value <= ts.bytes_received:
            return True
        ts.bytes_received = value
        chain = self.chains[ts.chain]
        if chain.members[-1] == tid:
            chain.tail_progress = value
        return True

    def disengage(self, tid: int, value: int = 0, occupied: bool = False) -> bool:
        ts = self.transfers.get(tid)
        if ts is None:
            return False
        self.progress(tid, value)
        self._event("disengage", tid=tid, occupied=bool(occupied))
        self._remove_transfer(ts)
        return True

    def _remove_transfer(self, ts: TransferSession) -> None:
        chain = self.chains[ts.chain]
        idx = chain.members.index(ts.tid)
        if idx == len(chain.members) - 1:
            chain.closed = True
        if idx > 0:
            prev = self.transfers[chain.members[idx - 1]]
            if prev.downstream == ts.tid:
                prev.downstream = None
        if ts.downstream is not None:
            self.transfers[ts.downstream].upstream = None
        del chain.members[idx]
        self._drop_head_slot(ts)
        del self.transfers[ts.tid]
        self._free_id(ts.tid)
        qs = self.queries.get(ts.query)
        if qs is not None:
            qs.transfers.discard(ts.tid)
        if chain.members:
            chain.tail_progress = self.transfers[chain.members[-1]].bytes_received
        else:
            self._remove_chain(chain)

    def _drop_head_slot(self, ts: TransferSession) -> None:
        for token, tid in list(self.head_slots.items()):
            if tid == ts.tid:
                del self.head_slots[token]
                self._free_id(token)

    def _remove_chain(self, chain: ChainSession) -> None:
        del self.chains[chain.chain_id]
        self._free_id(chain.chain_id)
        fs = self.files[chain.file]
        fs.chains.remove(chain.chain_id)
        self._event("chain-close", chain=chain.chain_id)
        if not fs.chains:
            del self.files[chain.file]
            self._event("file-close", file=chain.file)

    def retransmit(self, tid: int, size_received: int, occupied: bool):
        """Move ``tid`` and the clients behind it to a new feeder.

        Returns (transfer session, feeder) or None for an unknown id.
        """
        ts = self.transfers.get(tid)
        if ts is None:
            return None
        self.progress(tid, size_received)
        chain = self.chains[ts.chain]
        k = chain.members.index(tid)
        moved = [self.transfers[t] for t in chain.members[k:]]
        failed = None
        if k > 0 and ts.upstream == chain.members[k - 1]:
            failed = self.transfers[chain.members[k - 1]]
            failed.downstream = None
            if occupied:
                failed.blocked = True
        del chain.members[k:]
        self._drop_head_slot(ts)
        ts.upstream = None
        exclude = set()
        was_closed = chain.closed
        if chain.members:
            chain.tail_progress = self.transfers[chain.members[-1]].bytes_received
            if failed is not None:
                exclude.add(chain.chain_id)
        else:
            self._remove_chain(chain)
        self._event("retransmit", tid=tid, failed=failed.tid if failed else None,
                    occupied=bool(occupied), at=ts.bytes_received)
        target = self.select_chain(ts.file, ts.client_bw, ts.bytes_received, exclude)
        if target is None:
            feeder = self._new_chain(moved, ts.client_bw, closed=was_closed)
        else:
            feeder = self._append(target, moved)
        return ts, feeder

    def validate_head(self, token: int, tid: int) -> Optional[TransferSession]:
        if self.head_slots.get(token) != tid:
            return None
        return self.transfers.get(tid)

    # -- invariants ---------------------------------------------------------

    def check_invariants(self) -> None:
        def fail(msg):
            raise InvariantError(msg)

        seen: dict[int, int] = {}
        for cid, chain in self.chains.items():
            if chain.chain_id != cid:
                fail(f"chain {cid} stored under the wrong key")
            if not chain.members:
                fail(f"chain {cid} is empty")
            fs = self.files.get(chain.file)
            if fs is None or cid not in fs.chains:
                fail(f"chain {cid} not listed under file {chain.file!r}")
            for i, tid in enumerate(chain.members):
                ts = self.transfers.get(tid)
                if ts is None:
                    fail(f"chain {cid} references dead transfer {tid}")
                if tid in seen:
                    fail(f"transfer {tid} is in chains {seen[tid]} and {cid}")
                seen[tid] = cid
                if ts.chain != cid or ts.file != chain.file:
                    fail(f"transfer {tid} disagrees about its chain")
                if i == 0:
                    if ts.upstream not in (SERVER, None):
                        fail(f"head {tid} has upstream {ts.upstream}")
                else:
                    prev = self.transfers[chain.members[i - 1]]
                    if ts.upstream not in (prev.tid, None):
                        fail(f"transfer {tid} fed by {ts.upstream}, not its predecessor")
                    if (ts.upstream == prev.tid) != (prev.downstream == tid):
                        fail(f"link {prev.tid}->{tid} is one-sided")
                if ts.upstream == SERVER and ts.tid not in self.head_slots.values():
                    fail(f"server-fed head {tid} has no head slot")
            tail = self.transfers[chain.members[-1]]
            if tail.downstream is not None:
                fail(f"tail {tail.tid} of chain {cid} has a downstream")
            if chain.tail_progress != tail.bytes_received:
                fail(f"chain {cid} tail_progress {chain.tail_progress} != {tail.bytes_received}")
        for tid, ts in self.transfers.items():
            if tid not in seen:
                fail(f"transfer {tid} belongs to no chain")
            if ts.downstream is not None:
                down = self.transfers.get(ts.downstream)
                if down is None or down.upstream != tid:
                    fail(f"downstream pointer of {tid} is stale")
            if ts.upstream not in (SERVER, None):
                up = self.transfers.get(ts.upstream)
                if up is None or up.downstream != tid:
                    fail(f"upstream pointer of {tid} is stale")
            qs = self.queries.get(ts.query)
            if qs is None or tid not in qs.transfers:
                fail(f"transfer {tid} has no live query session")
            if not 0 <= ts.bytes_received <= ts.size:
                fail(f"transfer {tid} progress out of range")
        for tid in self.transfers:  # every feeder path is simple and finite
            steps, cur = 0, tid
            while self.transfers[cur].downstream is not None:
                cur = self.transfers[cur].downstream
                steps += 1
                if steps > len(self.transfers):
                    fail(f"cycle through transfer {tid}")
        for h, qs in self.queries.items():
            for tid in qs.transfers:
                if tid not in self.transfers or self.transfers[tid].query != h:
                    fail(f"query {h} lists dead transfer {tid}")
        for path, fs in self.files.items():
            if not fs.chains:
                fail(f"file session {path!r} has no chains")
            for cid in fs.chains:
                if cid not in self.chains:
                    fail(f"file {path!r} lists dead chain {cid}")
        for token, tid in self.head_slots.items():
            ts = self.transfers.get(tid)
            if ts is None or ts.upstream != SERVER or ts.service_token != token:
                fail(f"head slot {token} is stale")
        ids = list(self.queries) + list(self.transfers) + list(self.chains) + list(self.head_slots)
        if len(ids) != len(set(ids)) or 0 in ids:
            fail("live ids collide or include 0")


# --------------------------------------------------------------------------
# files
# --------------------------------------------------------------------------


class FileTree:
    """Read-only view of a directory; virtual paths are POSIX and rooted at '/'."""

    def __init__(self, root):
        self.root = Path(root).resolve()
        if not self.root.is_dir():
            raise FileNotFoundError(f"served root {root} is not a directory")

    def _real(self, vpath: str) -> Optional[Path]:
        real = (self.root / vpath.lstrip("/")).resolve()
        if real != self.root and self.root not in real.parents:
            return None
        return real

    @staticmethod
    def join(cwd: str, name: str) -> Optional[str]:
        """Normalise ``name`` against ``cwd``; None if it climbs above the root."""
        if "\x00" in name:
            return None
        parts = [] if name.startswith("/") else [p for p in cwd.split("/") if p]
        for comp in name.split("/"):
            if comp in ("", "."):
                continue
            if comp == "..":
                if not parts:
                    return None
                parts.pop()
            else:
                parts.append(comp)
        return "/" + "/".join(parts)

    def cd(self, cwd: str, name: str) -> Optional[str]:
        vpath = self.join(cwd, name)
        if vpath is None:
            return None
        real = self._real(vpath)
        return vpath if real is not None and real.is_dir() else None

    def ls(self, cwd: str) -> Optional[list[str]]:
        real = self._real(cwd)
        if real is None or not real.is_dir():
            return None
        return sorted(p.name for p in real.iterdir() if self._real(posixpath.join(cwd, p.name)))

    def file(self, cwd: str, name: str) -> Optional[tuple[str, Path]]:
        vpath = self.join(cwd, name)
        if vpath is None:
            return None
        real = self._real(vpath)
        if real is None or not real.is_file():
            return None
        return vpath, real


# --------------------------------------------------------------------------
# async server
# --------------------------------------------------------------------------


@dataclass
class ServerStats:
    data_bytes: int = 0  # file bytes written to head streams
    chunks: int = 0
    measurement_ns: int = 0
    measurements: int = 0
    measurement_failures: int = 0


class Server:
    def __init__(self, net, config: ServerConfig = ServerConfig()):
        self.net = net
        self.config = config
        self.tree = FileTree(config.root)
        self.registry = Registry(config, (net.ip, config.port),
                                 clock=lambda: net.clock_ns() / 1e9)
        self.stats = ServerStats()
        self._ep = None
        self._listener = None
        self._tasks: set = set()
        self._mlock = asyncio.Lock()
        self._quiet = asyncio.Event()
        self._quiet.set()
        self._writers = 0
        self._writers_idle = asyncio.Event()
        self._writers_idle.set()
        self._replies: OrderedDict = OrderedDict()  # (src, raw) -> (expiry, reply)
        self._busy: set = set()
        self._files: dict[str, Path] = {}

    @property
    def port(self) -> int:
        return self._ep.port

    @property
    def egress_bytes(self) -> int:
        return self.net.sent_bytes

    async def start(self) -> "Server":
        self._ep = await self.net.open_datagram(self.config.port)
        try:
            self._listener = await self.net.listen_stream(self._ep.port, self._serve_head)
        except OSError:
            self._ep.close()
            raise
        self.registry.server_addr = (self.net.ip, self._ep.port)
        self._spawn(self._control_loop())
        self._spawn(self._reaper())
        log.info("server on %s:%d serving %s", self.net.ip, self._ep.port, self.tree.root)
        return self

    async def close(self) -> None:
        for t in list(self._tasks):
            t.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        if self._listener is not None:
            self._listener.close()
        if self._ep is not None:
            self._ep.close()

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.close()

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def _reaper(self) -> None:
        period = max(1.0, self.config.query_timeout / 4)
        while True:
            await asyncio.sleep(period)
            for h in self.registry.expire_idle():
                log.info("query session %d timed out", h)

    # -- control plane -------------------------------------------------------

    async def _control_loop(self) -> None:
        while True:
            try:
                data, src = await self._ep.recv()
            except OSError:
                return
            try:
                op = wire.decode(data)
            except wire.WireError as exc:
                log.debug("dropping malformed datagram from %s: %s", src, exc)
                continue
            if op.protocol not in (wire.QUERY, wire.CT):
                continue
            cacheable = isinstance(op, (wire.StartQuerySessionRequest, wire.GetRequest,
                                        wire.RetransmissionRequest))
            if cacheable:
                key = (src, bytes(data))
                now = self.net.clock_ns() / 1e9
                hit = self._replies.get(key)
                if hit is not None and hit[0] > now:
                    self._ep.send(hit[1], src)
                    continue
                if key in self._busy:
                    continue
                self._busy.add(key)
                self._spawn(self._handle_cached(key, op, src))
            else:
                reply = self.handle(op, src)
                if reply is not None:
                    self._ep.send(wire.encode(reply), src)

    async def _handle_cached(self, key, op, src) -> None:
        try:
            if isinstance(op, wire.GetRequest):
                reply = await self.handle_get(op, src)
            else:
                reply = self.handle(op, src)
        finally:
            self._busy.discard(key)
        raw = wire.encode(reply)
        self._replies[key] = (self.net.clock_ns() / 1e9 + self.config.reply_cache_s, raw)
        while len(self._replies) > 1024:
            self._replies.popitem(last=False)
        if not self._ep.closed:
            self._ep.send(raw, src)

    def handle(self, op, src):
        """Apply one non-blocking control op; returns the reply op or None."""
        reg = self.registry
        if isinstance(op, wire.StartQuerySessionRequest):
            qs = reg.open_query(src[0], op)
            return wire.StartQuerySessionReply(qs.handle, True)
        if isinstance(op, wire.StopQuerySession):
            reg.close_query(op.session_handle)
            return None
        if isinstance(op, wire.LsRequest):
            qs = reg.query(op.session_handle)
            names = self.tree.ls(qs.cwd) if qs else None
            if names is None:
                return wire.LsReply(op.session_handle, False)
            return wire.LsReply(op.session_handle, True, tuple(names))
        if isinstance(op, wire.PwdRequest):
            qs = reg.query(op.session_handle)
            return wire.PwdReply(op.session_handle, qs is not None, qs.cwd if qs else "")
        if isinstance(op, wire.CdRequest):
            qs = reg.query(op.session_handle)
            target = self.tree.cd(qs.cwd, op.dir) if qs else None
            if target is None:
                return wire.CdReply(op.session_handle, False)
            qs.cwd = target
            return wire.CdReply(op.session_handle, True)
        if isinstance(op, wire.ProgressReport):
            reg.progress(op.transfer_session_id, op.bytes_received)
            return None
        if isinstance(op, wire.DisengageCommand):
            reg.disengage(op.transfer_session_id, op.bytes_received, op.service_client_occupied)
            return None
        if isinstance(op, wire.RetransmissionRequest):
            res = reg.retransmit(op.transfer_session_id, op.size_received,
                                 op.service_client_occupied)
            if res is None:
                return wire.RetransmissionReply(op.transfer_session_id, False)
            ts, feeder = res
            return wire.RetransmissionReply(ts.tid, True, feeder.ip, feeder.port, feeder.token)
        if isinstance(op, wire.GetRequest):
            raise TypeError("GetRequest needs handle_get")
        log.debug("ignoring %s from %s", type(op).__name__, src)
        return None

    async def measure(self, peer):
        """Capacity towards ``peer`` with head streams paused; returns bits/second."""
        async with self._mlock:
            self._quiet.clear()
            start = self.net.clock_ns()
            try:
                await self._writers_idle.wait()
                result = await run_initiator(self.net, peer, self.config.measurement)
            finally:
                self._quiet.set()
                self.stats.measurement_ns += self.net.clock_ns() - start
                self.stats.measurements += 1
        return result

    async def handle_get(self, op: wire.GetRequest, src) -> wire.GetReply:
        reg = self.registry
        qs = reg.query(op.session_handle)
        if qs is None:
            return wire.GetReply(op.session_handle, False)
        found = self.tree.file(qs.cwd, op.file_name)
        if found is None:
            return wire.GetReply(op.session_handle, False)
        vpath, real = found
        size = real.stat().st_size
        if size > 0xFFFFFFFF:
            return wire.GetReply(op.session_handle, False)
        try:
            result = await self.measure((qs.ip, qs.bw_port))
        except MeasurementError as exc:
            self.stats.measurement_failures += 1
            log.info("bandwidth to %s:%d failed: %s", qs.ip, qs.bw_port, exc)
            return wire.GetReply(op.session_handle, False)
        if reg.queries.get(qs.handle) is not qs:
            return wire.GetReply(op.session_handle, False)
        bw = min(int(result.capacity_bps), 0xFFFFFFFF)
        ts, feeder = reg.join(qs, vpath, size, bw)
        self._files[vpath] = real
        log.info("get %s by %s: tid=%d bw=%d feeder=%s:%d", vpath, qs.ip, ts.tid, bw,
                 feeder.ip, feeder.port)
        return wire.GetReply(op.session_handle, True, feeder.ip, feeder.port, feeder.token,
                             ts.tid, size, bw)

    # -- head transfers -------------------------------------------------------

    async def _serve_head(self, stream) -> None:
        try:
            req = await wire.read_packet(stream)
        except wire.WireError as exc:
            log.debug("bad transfer request from %s: %s", stream.peer, exc)
            return
        if not isinstance(req, wire.StartTransferRequest):
            return
        tid = req.transfer_session_id
        ts = self.registry.validate_head(req.service_session_id, tid)
        if ts is None:
            stream.write(wire.encode(wire.TransferDenied(tid, DenyReason.BAD_SERVICE_SESSION)))
            await stream.drain()
            return
        if not 1 <= req.chunk_size <= self.config.max_chunk_size:
            stream.write(wire.encode(wire.TransferDenied(tid, DenyReason.CHUNK_TOO_BIG)))
            await stream.drain()
            return
        if req.start_position > ts.size:
            stream.write(wire.encode(wire.TransferDenied(tid, DenyReason.INTERNAL)))
            await stream.drain()
            return
        real = self._files.get(ts.file)
        try:
            data = real.read_bytes()
        except OSError as exc:
            log.warning("cannot read %s: %s", real, exc)
            stream.write(wire.encode(wire.TransferDenied(tid, DenyReason.INTERNAL)))
            await stream.drain()
            return
        data = data[: ts.size]
        await self._stream_chunks(stream, req, data, req.service_session_id)

    async def _stream_chunks(self, stream, req, data: bytes, token: int) -> None:
        pos = req.start_position
        size = req.chunk_size
        number = 0
        while True:
            await self._quiet.wait()
            if self.registry.head_slots.get(token) != req.transfer_session_id:
                log.info("head slot %d withdrawn; closing stream", token)
                return
            chunk = data[pos:pos + size]
            last = pos + len(chunk) >= len(data)
            pkt = wire.TransferReply.padded(req.transfer_session_id, chunk, size, last, number)
            self._writers += 1
            self._writers_idle.clear()
            try:
                stream.write(wire.encode(pkt))
                await stream.drain()
            finally:
                self._writers -= 1
                if self._writers == 0:
                    self._writers_idle.set()
            self.stats.data_bytes += len(chunk)
            self.stats.chunks += 1
            pos += len(chunk)
            number += 1
            if last:
                return


async def run_server(net, config: ServerConfig, started: Optional[asyncio.Future] = None):
    """Run until cancelled."""
    server = Server(net, config)
    await server.start()
    if started is not None and not started.done():
        started.set_result(server)
    try:
        await asyncio.Event().wait()
    finally:
        await server.close()


__all__ = ["ServerConfig", "Registry", "Server", "FileTree", "Feeder", "QuerySession",
           "TransferSession", "ChainSession", "FileSession", "InvariantError", "run_server",
           "SERVER"]
