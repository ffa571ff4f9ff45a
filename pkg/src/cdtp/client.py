"""CDTP client: downloads a file while relaying it to the next chain member."""

from __future__ import annotations

import asyncio
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional

from . import wire
from .bandwidth import MeasurementConfig, MeasurementError, MeasurementFailed, run_initiator, \
    serve_responder
from .wire import DenyReason

log = logging.getLogger(__name__)


class ClientError(Exception):
    pass


class SessionFailed(ClientError):
    pass


class GetFailed(ClientError):
    pass


@dataclass(frozen=True)
class ClientConfig:
    server: tuple = ("127.0.0.1", wire.SERVER_PORT)
    query_port: int = 0
    transfer_port: int = 0
    control_port: int = 0
    bw_port: int = 0
    chunk_size: int = 8192
    request_timeout: float = 3.0
    request_retries: int = 3
    get_timeout: float = 120.0
    connect_timeout: float = 3.0
    inactivity_timeout: float = 10.0
    stall_timeout: float = 30.0
    recovery_attempts: int = 3
    recovery_backoff: float = 1.0
    bw_tolerance: float = 0.25
    measurement: MeasurementConfig = MeasurementConfig()
    batch_file: Optional[str] = None
    batch_port: int = wire.BATCH_CLIENT_PORT
    output_dir: Optional[str] = None

    def __post_init__(self):
        ports = [p for p in (self.query_port, self.transfer_port, self.control_port,
                             self.bw_port) if p]
        if len(ports) != len(set(ports)):
            raise ValueError("client ports must be distinct")
        if not 1 <= self.chunk_size <= 0xFFFFFFFF:
            raise ValueError("chunk size out of range")
        if not 0 <= self.bw_tolerance < 1:
            raise ValueError("bandwidth tolerance must be in [0, 1)")


@dataclass
class DownloadState:
    transfer_session_id: int
    file_name: str
    file_size: int
    chunk_size: int
    link_speed: int
    feeder: tuple = ("0.0.0.0", 0, 0)  # ip, port, service session id
    buffer: bytearray = field(default_factory=bytearray)
    started_ns: int = 0
    finished_ns: int = 0
    done: bool = False
    failed: bool = False
    released: bool = False
    progress_reports: int = 0
    recoveries: int = 0
    _changed: asyncio.Event = field(default_factory=asyncio.Event, repr=False)

    @property
    def bytes_received(self) -> int:
        return len(self.buffer)

    def append(self, data: bytes) -> None:
        if self.bytes_received + len(data) > self.file_size:
            raise ValueError("data beyond the end of the file")
        self.buffer += data
        self._wake()

    def finish(self, ok: bool) -> None:
        self.done = True
        self.failed = not ok
        self._wake()

    def _wake(self) -> None:
        self._changed.set()
        self._changed = asyncio.Event()

    async def wait_for(self, n: int, timeout: float) -> bool:
        """Wait until ``n`` bytes are present; False on stall or local failure."""
        loop = asyncio.get_running_loop()
        deadline = loop.time() + timeout
        while self.bytes_received < n:
            if self.done or self.released:
                return False
            remaining = deadline - loop.time()
            if remaining <= 0:
                return False
            try:
                await asyncio.wait_for(self._changed.wait(), remaining)
            except asyncio.TimeoutError:
                return False
        return True


@dataclass(frozen=True)
class Broken:
    reason: str
    occupied: bool


class Client:
    def __init__(self, net, config: ClientConfig = ClientConfig(),
                 on_progress: Optional[Callable[[DownloadState], None]] = None):
        self.net = net
        self.config = config
        self.on_progress = on_progress
        self.handle: Optional[int] = None
        self.download: Optional[DownloadState] = None
        self.service_token: Optional[int] = None
        self._serving: Optional[tuple] = None
        self._query_ep = None
        self._control_ep = None
        self._bw_ep = None
        self._batch_ep = None
        self._listener = None
        self._tasks: set = set()
        self._query_lock = asyncio.Lock()
        self._control_lock = asyncio.Lock()
        self._serving_done = asyncio.Event()
        self._serving_done.set()
        self.served_bytes = 0
        self._batch_running = False
        self.denials: list[int] = []

    @property
    def server(self) -> tuple:
        return (self.config.server[0], int(self.config.server[1]))

    @property
    def ports(self) -> dict:
        return {"query": self._query_ep.port, "transfer": self._listener.port,
                "control": self._control_ep.port, "bw": self._bw_ep.port}

    # -- lifecycle -----------------------------------------------------------

    async def start(self, session: bool = True) -> "Client":
        c = self.config
        self._query_ep = await self.net.open_datagram(c.query_port)
        self._control_ep = await self.net.open_datagram(c.control_port)
        self._bw_ep = await self.net.open_datagram(c.bw_port)
        self._listener = await self.net.listen_stream(c.transfer_port, self._serve_downstream)
        self._spawn(serve_responder(self._bw_ep))
        if session:
            await self.start_session()
        return self

    async def close(self) -> None:
        if self.handle is not None and not self._query_ep.closed:
            self._query_ep.send(wire.encode(wire.StopQuerySession(self.handle)), self.server)
            self.handle = None
        for t in list(self._tasks):
            t.cancel()
        if self._tasks:
            await asyncio.gather(*self._tasks, return_exceptions=True)
        for ep in (self._query_ep, self._control_ep, self._bw_ep, self._batch_ep,
                   self._listener):
            if ep is not None:
                ep.close()

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, *exc):
        await self.close()

    def _spawn(self, coro) -> asyncio.Task:
        task = asyncio.ensure_future(coro)
        self._tasks.add(task)
        task.add_done_callback(self._tasks.discard)
        return task

    async def wait_serving_done(self) -> None:
        await self._serving_done.wait()

    # -- request/reply over UDP ------------------------------------------------

    async def _request(self, ep, lock, op, reply_type, match, timeout: float, retries: int):
        raw = wire.encode(op)
        loop = asyncio.get_running_loop()
        async with lock:
            for _ in range(retries):
                ep.send(raw, self.server)
                deadline = loop.time() + timeout
                while True:
                    remaining = deadline - loop.time()
                    if remaining <= 0:
                        break
                    try:
                        data, src = await asyncio.wait_for(ep.recv(), remaining)
                    except asyncio.TimeoutError:
                        break
                    try:
                        reply = wire.decode(data)
                    except wire.WireError:
                        continue
                    if isinstance(reply, reply_type) and match(reply):
                        return reply
        return None

    async def _query(self, op, reply_type, timeout=None, retries=None):
        handle = getattr(op, "session_handle", None)
        return await self._request(
            self._query_ep, self._query_lock, op, reply_type,
            lambda r: handle is None or r.session_handle == handle,
            timeout or self.config.request_timeout, retries or self.config.request_retries)

    async def start_session(self) -> int:
        p = self.ports
        reply = await self._query(
            wire.StartQuerySessionRequest(p["query"], p["transfer"], p["control"], p["bw"]),
            wire.StartQuerySessionReply)
        if reply is None:
            raise SessionFailed(f"no answer from server {self.server[0]}:{self.server[1]}")
        if not reply.success or reply.session_handle == 0:
            raise SessionFailed("server refused the query session")
        self.handle = reply.session_handle
        return self.handle

    def _need_session(self) -> int:
        if self.handle is None:
            raise SessionFailed("no query session")
        return self.handle

    async def ls(self) -> list[str]:
        reply = await self._query(wire.LsRequest(self._need_session()), wire.LsReply)
        if reply is None or not reply.success:
            raise ClientError("ls failed")
        return list(reply.names)

    async def pwd(self) -> str:
        reply = await self._query(wire.PwdRequest(self._need_session()), wire.PwdReply)
        if reply is None or not reply.success:
            raise ClientError("pwd failed")
        return reply.path

    async def cd(self, directory: str) -> None:
        reply = await self._query(wire.CdRequest(self._need_session(), directory), wire.CdReply)
        if reply is None or not reply.success:
            raise ClientError(f"cd {directory} failed")

    # -- download --------------------------------------------------------------

    @property
    def busy(self) -> bool:
        return self.download is not None and not self.download.done

    async def get(self, name: str) -> bytes:
        handle = self._need_session()
        if self.busy:
            raise GetFailed("a download is already running")
        c = self.config
        retries = max(1, int(c.get_timeout / c.request_timeout))
        reply = await self._query(wire.GetRequest(handle, name), wire.GetReply,
                                  c.request_timeout, retries)
        if reply is None:
            raise GetFailed(f"no reply to get {name}")
        if not reply.success:
            raise GetFailed(f"server refused get {name}")
        state = DownloadState(reply.transfer_session_id, name, reply.file_size, c.chunk_size,
                              reply.link_speed_bps,
                              (reply.service_ip, reply.service_tcp_port, reply.service_session_id),
                              started_ns=self.net.clock_ns())
        if self._serving is not None:
            await self._serving_done.wait()
        self.download = state
        self.service_token = reply.service_session_id
        log.info("get %s: %d bytes from %s:%d", name, state.file_size, reply.service_ip,
                 reply.service_tcp_port)
        try:
            await self._download(state)
        except BaseException:
            state.finish(False)
            raise
        state.finished_ns = self.net.clock_ns()
        data = bytes(state.buffer)
        state.finish(True)
        self._send_control(wire.DisengageCommand(state.transfer_session_id,
                                                 state.bytes_received, False))
        if self._serving is None:
            state.released = True
            state.buffer = bytearray()
        if c.output_dir:
            Path(c.output_dir, Path(name).name).write_bytes(data)
        return data

    def _send_control(self, op) -> None:
        if not self._control_ep.closed:
            self._control_ep.send(wire.encode(op), self.server)

    async def _download(self, state: DownloadState) -> None:
        c = self.config
        failures = 0
        while True:
            before = state.bytes_received
            broken = await self._fetch(state)
            if broken is None:
                return
            log.info("transfer %d broken at %d: %s", state.transfer_session_id,
                     state.bytes_received, broken.reason)
            failures = 0 if state.bytes_received > before else failures + 1
            if failures >= c.recovery_attempts:
                raise GetFailed(f"recovery failed after {failures} attempts: {broken.reason}")
            if failures:
                await asyncio.sleep(c.recovery_backoff)
            await self.recover(state, broken.occupied)

    async def recover(self, state: DownloadState, occupied: bool) -> None:
        reply = await self._request(
            self._control_ep, self._control_lock,
            wire.RetransmissionRequest(state.transfer_session_id, state.bytes_received, occupied),
            wire.RetransmissionReply,
            lambda r: r.transfer_session_id == state.transfer_session_id,
            self.config.request_timeout, self.config.request_retries)
        if reply is None or not reply.success:
            raise GetFailed("retransmission request refused")
        state.feeder = (reply.alt_ip, reply.alt_port, reply.new_service_session_id)
        state.recoveries += 1
        self.service_token = reply.new_service_session_id

    async def _fetch(self, state: DownloadState) -> Optional[Broken]:
        c = self.config
        ip, port, token = state.feeder
        try:
            stream = await self.net.connect_stream((ip, port), c.connect_timeout)
        except (OSError, TimeoutError) as exc:
            return Broken(f"feeder unreachable: {exc}", False)
        occupied = False
        try:
            stream.write(wire.encode(wire.StartTransferRequest(
                token, state.transfer_session_id, state.bytes_received, state.chunk_size,
                state.link_speed, self._bw_ep.port)))
            await stream.drain()
            expected = 0
            while True:
                pkt = await asyncio.wait_for(wire.read_packet(stream), c.inactivity_timeout)
                if isinstance(pkt, wire.TransferDenied):
                    self.denials.append(pkt.reason)
                    text = DenyReason.TEXT.get(pkt.reason, f"reason {pkt.reason}")
                    return Broken(text, occupied)
                if (not isinstance(pkt, wire.TransferReply)
                        or pkt.transfer_session_id != state.transfer_session_id
                        or pkt.chunk_number != expected
                        or pkt.actual_chunk_size > len(pkt.data)
                        or state.bytes_received + pkt.actual_chunk_size > state.file_size):
                    return Broken("corrupt transfer reply", True)
                occupied = True
                state.append(pkt.payload)
                expected += 1
                state.progress_reports += 1
                self._send_control(wire.ProgressReport(state.transfer_session_id,
                                                       state.bytes_received))
                if self.on_progress is not None:
                    self.on_progress(state)
                if pkt.is_last:
                    if state.bytes_received != state.file_size:
                        return Broken("stream ended early", True)
                    return None
        except asyncio.TimeoutError:
            return Broken("feeder inactive", occupied)
        except (ConnectionError, asyncio.IncompleteReadError, wire.WireError, OSError) as exc:
            return Broken(f"stream error: {exc!r}", occupied)
        finally:
            stream.close()

    # -- serving the next chain member ----------------------------------------

    async def _deny(self, stream, tid: int, reason: int) -> None:
        stream.write(wire.encode(wire.TransferDenied(tid, reason)))
        await stream.drain()

    async def _serve_downstream(self, stream) -> None:
        c = self.config
        try:
            req = await asyncio.wait_for(wire.read_packet(stream), c.inactivity_timeout)
        except (asyncio.TimeoutError, wire.WireError):
            return
        if not isinstance(req, wire.StartTransferRequest):
            return
        tid = req.transfer_session_id
        state = self.download
        if self.service_token is None or req.service_session_id != self.service_token:
            return await self._deny(stream, tid, DenyReason.BAD_SERVICE_SESSION)
        if state is None or state.released or state.failed:
            return await self._deny(stream, tid, DenyReason.GOING_DOWN)
        if self._serving is not None:
            return await self._deny(stream, tid, DenyReason.ALREADY_SERVING)
        if not 1 <= req.chunk_size <= 65536:
            return await self._deny(stream, tid, DenyReason.CHUNK_TOO_BIG)
        if req.start_position > state.file_size:
            return await self._deny(stream, tid, DenyReason.INTERNAL)
        self._serving = (stream.peer, tid)
        self._serving_done.clear()
        try:
            if not await self._link_ok(stream.peer[0], req):
                return await self._deny(stream, tid, DenyReason.INCOMPATIBLE_LINK_SPEED)
            await self._stream_to(stream, req, state)
        finally:
            self._serving = None
            if state.done and not state.released:
                state.released = True
                state.buffer = bytearray()
            self._serving_done.set()

    async def _link_ok(self, ip: str, req: wire.StartTransferRequest) -> bool:
        try:
            result = await run_initiator(self.net, (ip, req.bw_peer2_port), self.config.measurement)
        except MeasurementFailed as exc:
            if exc.degenerate:
                # dispersion below clock resolution: the link is faster than we can resolve
                return True
            log.info("service check towards %s failed: %s", ip, exc)
            return False
        except MeasurementError:
            return False
        floor = req.requested_link_speed_bps * (1 - self.config.bw_tolerance)
        return result.capacity_bps >= floor

    async def _stream_to(self, stream, req: wire.StartTransferRequest,
                         state: DownloadState) -> None:
        pos = req.start_position
        size = req.chunk_size
        number = 0
        while True:
            end = min(pos + size, state.file_size)
            if not await state.wait_for(end, self.config.stall_timeout):
                if state.bytes_received < end:
                    await self._deny(stream, req.transfer_session_id, DenyReason.GOING_DOWN)
                    return
            chunk = bytes(state.buffer[pos:end])
            last = end >= state.file_size
            stream.write(wire.encode(wire.TransferReply.padded(
                req.transfer_session_id, chunk, size, last, number)))
            await stream.drain()
            self.served_bytes += len(chunk)
            pos = end
            number += 1
            if last:
                return

    # -- remote batch control ----------------------------------------------------

    async def start_batch(self) -> int:
        self._batch_ep = await self.net.open_datagram(self.config.batch_port)
        self._spawn(self._batch_loop())
        return self._batch_ep.port

    async def _batch_loop(self) -> None:
        while True:
            try:
                data, src = await self._batch_ep.recv()
            except OSError:
                return
            try:
                pkt = wire.decode(data, wire.BATCH)
            except wire.WireError:
                continue
            if pkt.op_id != wire.BatchOp.BEGIN_REQUEST:
                continue
            can = (self.config.batch_file is not None and self.handle is not None
                   and not self.busy and not self._batch_running)
            self._batch_ep.send(wire.encode(wire.BatchPacket(wire.BatchOp.BEGIN_REPLY, int(can))),
                                src)
            if can:
                self._batch_running = True
                self._spawn(self._batch_get(src))

    async def _batch_get(self, controller) -> None:
        try:
            await self.get(self.config.batch_file)
            ok = 1
        except (ClientError, OSError) as exc:
            log.info("batch get failed: %s", exc)
            ok = 0
        finally:
            self._batch_running = False
        if not self._batch_ep.closed:
            self._batch_ep.send(wire.encode(wire.BatchPacket(wire.BatchOp.BEGIN_RESULT, ok)),
                                controller)


async def batch_control(net, targets, timeout: float = 5.0, result_timeout: float = 300.0,
                        port: int = wire.BATCH_CONTROLLER_PORT) -> dict:
    """Start a get on every target and collect (reply, result) per target."""
    ep = await net.open_datagram(port)
    loop = asyncio.get_running_loop()
    targets = [(t[0], int(t[1])) for t in targets]
    rows = {t: {"reply": None, "result": None} for t in targets}
    try:
        for t in targets:
            ep.send(wire.encode(wire.BatchPacket(wire.BatchOp.BEGIN_REQUEST, 0)), t)
        reply_deadline = loop.time() + timeout
        result_deadline = loop.time() + result_timeout

        def pending():
            now = loop.time()
            out = []
            for t, row in rows.items():
                if row["reply"] is None and now < reply_deadline:
                    out.append(t)
                elif row["reply"] == 1 and row["result"] is None and now < result_deadline:
                    out.append(t)
            return out

        while pending():
            waits = [reply_deadline if rows[t]["reply"] is None else result_deadline
                     for t in pending()]
            remaining = min(waits) - loop.time()
            try:
                data, src = await asyncio.wait_for(ep.recv(), max(remaining, 0))
            except asyncio.TimeoutError:
                continue
            try:
                pkt = wire.decode(data, wire.BATCH)
            except wire.WireError:
                continue
            row = rows.get((src[0], src[1]))
            if row is None:
                continue
            if pkt.op_id == wire.BatchOp.BEGIN_REPLY and row["reply"] is None:
                row["reply"] = pkt.data
            elif pkt.op_id == wire.BatchOp.BEGIN_RESULT and row["result"] is None:
                row["result"] = pkt.data
    finally:
        ep.close()
    return rows
