"""Real-socket transport with the same contract as the simulated hosts.

Protocol code only sees a ``net`` object offering::

    net.ip                                  local address as dotted string
    net.clock_ns()                          monotonic nanoseconds
    await net.open_datagram(port=0)         -> endpoint (.port, .send, .recv, .close)
    await net.listen_stream(port, handler)  -> listener (.port, .close)
    await net.connect_stream(addr, timeout) -> stream

and streams offering ``write``, ``drain``, ``read_exactly``, ``close``,
``abort`` and ``peer``.  An optional :class:`TokenBucket` paces everything
this host sends, which is how a slow access link is emulated on loopback.
"""

from __future__ import annotations

import asyncio
import logging
import time
from typing import Optional

log = logging.getLogger(__name__)

SEGMENT = 1460


class TokenBucket:
    """Egress pacer with zero burst: each send occupies ``len/rate`` seconds.

    Sends are released in FIFO order at the moment their last byte would
    have left a link of ``rate`` bytes per second.
    """

    def __init__(self, rate: float):
        if rate <= 0:
            raise ValueError("rate must be positive")
        self.rate = float(rate)
        self._free = 0.0
        self.bytes_sent = 0

    def release_time(self, now: float, size: int) -> float:
        start = max(now, self._free)
        self._free = start + size / self.rate
        self.bytes_sent += size
        return self._free

    def schedule(self, size: int, fn, *args) -> asyncio.TimerHandle:
        loop = asyncio.get_running_loop()
        return loop.call_at(self.release_time(loop.time(), size), fn, *args)


class _DatagramProtocol(asyncio.DatagramProtocol):
    def __init__(self):
        self.queue: asyncio.Queue = asyncio.Queue()

    def datagram_received(self, data, addr):
        self.queue.put_nowait((data, (addr[0], addr[1])))

    def error_received(self, exc):
        log.debug("datagram error: %s", exc)

    def connection_lost(self, exc):
        self.queue.put_nowait(None)


class RealDatagramEndpoint:
    def __init__(self, net: "AsyncioNet", transport, protocol: _DatagramProtocol):
        self.net = net
        self._transport = transport
        self._protocol = protocol
        self.port = transport.get_extra_info("sockname")[1]
        self.closed = False

    def send(self, data: bytes, addr) -> None:
        if self.closed:
            raise OSError("datagram endpoint is closed")
        addr = (addr[0], int(addr[1]))
        self.net.sent_bytes += len(data)
        if self.net.pacer is None:
            self._transport.sendto(data, addr)
        else:
            self.net.pacer.schedule(len(data) + 28, self._late_send, bytes(data), addr)

    def _late_send(self, data, addr):
        if not self.closed:
            self._transport.sendto(data, addr)

    async def recv(self):
        if self.closed:
            raise OSError("datagram endpoint is closed")
        item = await self._protocol.queue.get()
        if item is None:
            raise OSError("datagram endpoint is closed")
        return item

    def close(self) -> None:
        if not self.closed:
            self.closed = True
            self._transport.close()


class RealStream:
    def __init__(self, net: "AsyncioNet", reader: asyncio.StreamReader,
                 writer: asyncio.StreamWriter):
        self.net = net
        self._reader = reader
        self._writer = writer
        peer = writer.get_extra_info("peername") or ("0.0.0.0", 0)
        self.peer = (peer[0], peer[1])
        self._pending = 0
        self._flushed: Optional[asyncio.Future] = None
        self.bytes_written = 0

    def write(self, data: bytes) -> None:
        if self._writer.is_closing():
            raise OSError("stream is closed")
        self.bytes_written += len(data)
        self.net.sent_bytes += len(data)
        pacer = self.net.pacer
        if pacer is None:
            self._writer.write(data)
            return
        for i in range(0, len(data), SEGMENT):
            piece = bytes(data[i:i + SEGMENT])
            self._pending += 1
            pacer.schedule(len(piece) + 40, self._release, piece)

    def _release(self, piece: bytes) -> None:
        self._pending -= 1
        if not self._writer.is_closing():
            self._writer.write(piece)
        if self._pending == 0 and self._flushed is not None and not self._flushed.done():
            self._flushed.set_result(None)

    async def drain(self) -> None:
        if self._pending:
            if self._flushed is None or self._flushed.done():
                self._flushed = asyncio.get_running_loop().create_future()
            await self._flushed
        await self._writer.drain()

    async def read_exactly(self, n: int) -> bytes:
        return await self._reader.readexactly(n)

    def close(self) -> None:
        if self._pending:
            asyncio.ensure_future(self._close_later())
        else:
            self._writer.close()

    async def _close_later(self) -> None:
        try:
            await self.drain()
        except (ConnectionError, OSError):
            pass
        self._writer.close()

    def abort(self) -> None:
        self._writer.transport.abort()

    @property
    def closed(self) -> bool:
        return self._writer.is_closing()


class RealListener:
    def __init__(self, server: asyncio.base_events.Server):
        self._server = server
        self.port = server.sockets[0].getsockname()[1]

    def close(self) -> None:
        self._server.close()


class AsyncioNet:
    def __init__(self, ip: str = "127.0.0.1", egress_rate: Optional[float] = None,
                 bind_ip: Optional[str] = None):
        self.ip = ip
        self.bind_ip = bind_ip or ip
        self.pacer = TokenBucket(egress_rate) if egress_rate else None
        self.sent_bytes = 0

    def clock_ns(self) -> int:
        return time.monotonic_ns()

    async def open_datagram(self, port: int = 0) -> RealDatagramEndpoint:
        loop = asyncio.get_running_loop()
        transport, protocol = await loop.create_datagram_endpoint(
            _DatagramProtocol, local_addr=(self.bind_ip, port))
        return RealDatagramEndpoint(self, transport, protocol)

    async def listen_stream(self, port: int, handler) -> RealListener:
        async def on_connect(reader, writer):
            stream = RealStream(self, reader, writer)
            try:
                await handler(stream)
            except (ConnectionError, asyncio.IncompleteReadError) as exc:
                log.debug("stream from %s ended: %s", stream.peer, exc)
            except Exception:
                log.exception("stream handler failed")
                stream.abort()
                return
            stream.close()

        server = await asyncio.start_server(on_connect, self.bind_ip, port)
        return RealListener(server)

    async def connect_stream(self, addr, timeout: float = 3.0) -> RealStream:
        try:
            reader, writer = await asyncio.wait_for(
                asyncio.open_connection(addr[0], int(addr[1])), timeout)
        except asyncio.TimeoutError:
            raise TimeoutError(f"connect to {addr[0]}:{addr[1]} timed out") from None
        return RealStream(self, reader, writer)
