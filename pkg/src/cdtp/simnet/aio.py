"""Run asyncio protocol code on simulated hosts under virtual time.

:class:`SimLoop` is an asyncio event loop whose clock is the simulator's
integer-nanosecond clock.  Whenever the loop would block, it dispatches the
next simulator event instead, so protocol coroutines written against the
real-socket transport run unchanged.
"""

from __future__ import annotations

import asyncio
import itertools
import logging
from typing import Awaitable, Callable, Optional

from .engine import NS, Network, Node, Packet, SimulationError

log = logging.getLogger(__name__)

UDP_OVERHEAD = 28
TCP_OVERHEAD = 40
MSS = 1460
WINDOW_SEGMENTS = 4


class SimulationStalled(SimulationError):
    """The main coroutine is waiting but no timer or network event remains."""


class _VirtualSelector:
    def __init__(self, loop: "SimLoop"):
        self.loop = loop

    def select(self, timeout):
        sim = self.loop.sim
        nxt = sim.next_time()
        if timeout is None:
            if nxt is None:
                raise SimulationStalled(f"nothing left to run at t={sim.now} ns")
            target = nxt
        elif timeout <= 0:
            target = sim.now
        else:
            target = sim.now + max(1, int(-(-timeout * NS // 1)))
            if nxt is not None and nxt < target:
                target = nxt
        if self.loop.time_limit_ns is not None and target > self.loop.time_limit_ns:
            raise SimulationError(f"virtual time limit {self.loop.time_limit_ns} ns exceeded")
        sim.run_due(target)
        return []

    def close(self):
        pass


class SimLoop(asyncio.BaseEventLoop):
    def __init__(self, sim):
        super().__init__()
        self.sim = sim
        self._selector = _VirtualSelector(self)
        self._clock_resolution = 1e-9
        self.time_limit_ns: Optional[int] = None

    def time(self) -> float:
        return self.sim.now / NS

    def _process_events(self, event_list):
        pass

    def _write_to_self(self):
        pass


class SimDatagramEndpoint:
    def __init__(self, host: "SimHost", port: int):
        self.host = host
        self.port = port
        self._queue: asyncio.Queue = asyncio.Queue()
        self.closed = False
        host.node.bind("udp", port, self._on_packet)

    @property
    def address(self):
        return (self.host.ip, self.port)

    def _on_packet(self, pkt: Packet) -> None:
        if not self.closed:
            self._queue.put_nowait((pkt.payload, pkt.src))

    def send(self, data: bytes, addr) -> None:
        if self.closed:
            raise OSError("datagram endpoint is closed")
        self.host.sent_bytes += len(data)
        self.host.emit(Packet(self.host.net.new_pid(), (self.host.ip, self.port),
                              (addr[0], int(addr[1])), len(data) + UDP_OVERHEAD, "udp",
                              bytes(data), self.host.net.sim.now))

    async def recv(self):
        if self.closed:
            raise OSError("datagram endpoint is closed")
        item = await self._queue.get()
        if item is None:
            raise OSError("datagram endpoint is closed")
        return item

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.host.node.unbind("udp", self.port)
            self._queue.put_nowait(None)
            self.host._endpoints.discard(self)


class SimStream:
    """Reliable ordered byte pipe over simulated packets with a fixed window."""

    def __init__(self, host: "SimHost", local_port: int, peer, window: int = WINDOW_SEGMENTS):
        self.host = host
        self.local_port = local_port
        self.peer = (peer[0], int(peer[1]))
        self.window = window
        self._sendbuf = bytearray()
        self._inflight = 0
        self._recvbuf = bytearray()
        self._eof = False
        self._reset = False
        self._closing = False
        self._fin_sent = False
        self._changed = asyncio.Event()
        self.bytes_written = 0
        self.on_closed: Optional[Callable[[], None]] = None

    def _emit(self, flag: str, data: bytes = b"") -> None:
        if flag == "DATA":
            self.host.sent_bytes += len(data)
        self.host.emit(Packet(self.host.net.new_pid(), (self.host.ip, self.local_port), self.peer,
                              len(data) + TCP_OVERHEAD, "tcp", (flag, data),
                              self.host.net.sim.now))

    def _wake(self) -> None:
        self._changed.set()
        self._changed = asyncio.Event()

    def on_packet(self, pkt: Packet) -> None:
        flag, data = pkt.payload
        if flag == "DATA":
            if self._reset:
                return
            self._recvbuf += data
            self._emit("ACK")
        elif flag == "ACK":
            self._inflight -= 1
            self._pump()
        elif flag == "FIN":
            self._eof = True
            self._maybe_done()
        elif flag == "RST":
            self._reset = True
            self._sendbuf.clear()
            self._maybe_done(force=True)
        self._wake()

    def _pump(self) -> None:
        if self._reset:
            return
        while self._sendbuf and self._inflight < self.window:
            seg = bytes(self._sendbuf[:MSS])
            del self._sendbuf[:MSS]
            self._inflight += 1
            self._emit("DATA", seg)
        if self._closing and not self._sendbuf and not self._fin_sent:
            self._fin_sent = True
            self._emit("FIN")
            self._maybe_done()
        self._wake()

    def _maybe_done(self, force: bool = False) -> None:
        if (force or (self._fin_sent and self._eof)) and self.on_closed is not None:
            cb, self.on_closed = self.on_closed, None
            cb()

    # -- stream contract ------------------------------------------------

    def write(self, data: bytes) -> None:
        if self._reset:
            raise ConnectionResetError("stream reset by peer")
        if self._closing:
            raise OSError("stream is closed")
        self.bytes_written += len(data)
        self._sendbuf += data
        self._pump()

    async def drain(self) -> None:
        while self._sendbuf:
            if self._reset:
                raise ConnectionResetError("stream reset by peer")
            await self._changed.wait()
        if self._reset:
            raise ConnectionResetError("stream reset by peer")

    async def read_exactly(self, n: int) -> bytes:
        while len(self._recvbuf) < n:
            if self._reset:
                raise ConnectionResetError("stream reset by peer")
            if self._eof:
                partial = bytes(self._recvbuf)
                self._recvbuf.clear()
                raise asyncio.IncompleteReadError(partial, n)
            await self._changed.wait()
        out = bytes(self._recvbuf[:n])
        del self._recvbuf[:n]
        return out

    def close(self) -> None:
        if not self._closing:
            self._closing = True
            self._pump()

    def abort(self) -> None:
        if not self._reset:
            self._emit("RST")
            self._reset = True
            self._sendbuf.clear()
            self._maybe_done(force=True)
            self._wake()

    @property
    def closed(self) -> bool:
        return self._reset or (self._closing and self._eof)


class SimListener:
    def __init__(self, host: "SimHost", port: int, handler: Callable[[SimStream], Awaitable]):
        self.host = host
        self.port = port
        self.handler = handler
        self._conns: dict = {}
        self.tasks: set = set()
        self.closed = False
        host.node.bind("tcp", port, self._on_packet)

    def _on_packet(self, pkt: Packet) -> None:
        flag, _ = pkt.payload
        conn = self._conns.get(pkt.src)
        if flag == "SYN":
            if conn is None and not self.closed:
                conn = SimStream(self.host, self.port, pkt.src)
                self._conns[pkt.src] = conn
                conn.on_closed = lambda src=pkt.src: self._conns.pop(src, None)
                conn._emit("SYNACK")
                task = asyncio.ensure_future(self._run(conn))
                self.tasks.add(task)
                task.add_done_callback(self.tasks.discard)
            return
        if conn is not None:
            conn.on_packet(pkt)
        elif flag not in ("RST", "ACK"):
            self.host.reset_to(pkt)

    async def _run(self, conn: SimStream) -> None:
        try:
            await self.handler(conn)
        except (ConnectionError, asyncio.IncompleteReadError) as exc:
            log.debug("stream from %s ended: %s", conn.peer, exc)
        except Exception:
            log.exception("stream handler on %s:%d failed", self.host.ip, self.port)
            conn.abort()
            return
        conn.close()

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self.host.node.unbind("tcp", self.port)
            self.host._endpoints.discard(self)


class SimHost:
    """Per-node transport: the same contract as :class:`cdtp.transport.AsyncioNet`."""

    EPHEMERAL_START = 49152

    def __init__(self, sim: "Simulation", node: Node):
        self.simulation = sim
        self.net = sim.network
        self.node = node
        self._ports = itertools.count(self.EPHEMERAL_START)
        self._endpoints: set = set()
        self.sent_bytes = 0
        node.unbound["tcp"] = self._unbound_tcp

    @property
    def ip(self) -> str:
        return self.node.ip

    @property
    def name(self) -> str:
        return self.node.name

    def clock_ns(self) -> int:
        return self.net.sim.now

    def emit(self, pkt: Packet) -> None:
        if self.node.alive:
            self.node.send(pkt)

    def _free_port(self) -> int:
        while True:
            port = next(self._ports)
            if ("udp", port) not in self.node.ports and ("tcp", port) not in self.node.ports:
                return port

    async def open_datagram(self, port: int = 0) -> SimDatagramEndpoint:
        ep = SimDatagramEndpoint(self, port or self._free_port())
        self._endpoints.add(ep)
        return ep

    async def listen_stream(self, port: int, handler) -> SimListener:
        lst = SimListener(self, port or self._free_port(), handler)
        self._endpoints.add(lst)
        return lst

    async def connect_stream(self, addr, timeout: float = 3.0) -> SimStream:
        port = self._free_port()
        stream = SimStream(self, port, addr)
        answer = asyncio.get_running_loop().create_future()

        def on_packet(pkt: Packet) -> None:
            flag, _ = pkt.payload
            if not answer.done():
                if flag == "SYNACK":
                    answer.set_result(True)
                elif flag == "RST":
                    answer.set_result(False)
                return
            stream.on_packet(pkt)

        self.node.bind("tcp", port, on_packet)
        stream.on_closed = lambda: self.node.unbind("tcp", port)
        stream._emit("SYN")
        try:
            ok = await asyncio.wait_for(answer, timeout)
        except asyncio.TimeoutError:
            self.node.unbind("tcp", port)
            raise TimeoutError(f"connect to {addr[0]}:{addr[1]} timed out") from None
        if not ok:
            self.node.unbind("tcp", port)
            raise ConnectionRefusedError(f"{addr[0]}:{addr[1]} refused the connection")
        return stream

    def _unbound_tcp(self, pkt: Packet) -> None:
        flag, _ = pkt.payload
        if flag != "RST":
            self.reset_to(pkt)

    def reset_to(self, pkt: Packet) -> None:
        self.emit(Packet(self.net.new_pid(), pkt.dst, pkt.src, TCP_OVERHEAD, "tcp", ("RST", b""),
                         self.net.sim.now))

    def kill(self) -> None:
        """Crash the host: it stops sending and receiving without notifying peers."""
        self.node.alive = False
        for ep in list(self._endpoints):
            ep.close()


class Simulation:
    """A network plus the virtual-time loop that drives protocol code on it."""

    def __init__(self, network: Optional[Network] = None, time_limit_s: Optional[float] = None):
        self.network = network or Network()
        self.sim = self.network.sim
        self.loop = SimLoop(self.sim)
        if time_limit_s is not None:
            self.loop.time_limit_ns = int(time_limit_s * NS)
        self._hosts: dict[str, SimHost] = {}

    def host(self, name: str) -> SimHost:
        h = self._hosts.get(name)
        if h is None:
            h = self._hosts[name] = SimHost(self, self.network.node(name))
        return h

    @property
    def now(self) -> float:
        return self.sim.now / NS

    def run(self, coro):
        return self.loop.run_until_complete(coro)

    def close(self) -> None:
        if self.loop.is_closed():
            return
        pending = [t for t in asyncio.all_tasks(self.loop) if not t.done()]
        for t in pending:
            t.cancel()
        if pending:
            limit, self.loop.time_limit_ns = self.loop.time_limit_ns, None
            try:
                self.loop.run_until_complete(asyncio.gather(*pending, return_exceptions=True))
            except SimulationError:
                pass
            self.loop.time_limit_ns = limit
        self.loop.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
