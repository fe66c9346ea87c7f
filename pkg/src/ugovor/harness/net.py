"""Clock, link delays and a lean raw-socket connection for the data path."""

from __future__ import annotations

import asyncio
import hashlib
import random
import socket
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Awaitable, Callable


class Clock:
    """Trace time on top of the event loop's monotonic clock.

    ``scale`` is wall seconds per trace second; 0.1 replays ten times faster
    than real time.  Every endpoint of a replay shares one clock, so only
    differences between readings carry meaning.
    """

    def __init__(self, scale: float = 1.0, loop: asyncio.AbstractEventLoop | None = None):
        if scale <= 0:
            raise ValueError("scale must be positive")
        self.scale = scale
        self.loop = loop or asyncio.get_running_loop()
        self._t0 = self.loop.time()

    def now(self) -> float:
        return (self.loop.time() - self._t0) / self.scale

    def wall_at(self, t: float) -> float:
        return self._t0 + t * self.scale

    async def sleep_until(self, t: float) -> None:
        delay = (t - self.now()) * self.scale
        if delay > 0:
            await asyncio.sleep(delay)

    async def sleep(self, dt: float) -> None:
        if dt > 0:
            await asyncio.sleep(dt * self.scale)

    def call_at(self, t: float, callback: Callable[[], None]) -> asyncio.TimerHandle:
        return self.loop.call_at(self.wall_at(t), callback)


class OrderedDelay:
    """One direction of a link: constant plus uniform jitter, order preserving."""

    def __init__(self, base: float, jitter: float, rng: random.Random):
        self.base = base
        self.jitter = jitter
        self.rng = rng
        self._last = float("-inf")

    def due(self, now: float, extra: float = 0.0) -> float:
        d = self.base + (self.rng.uniform(0.0, self.jitter) if self.jitter > 0 else 0.0) + extra
        self._last = max(self._last, now + d)
        return self._last


class DelayedSender:
    """Sends items through ``send`` once their link delay has elapsed, in order."""

    def __init__(self, clock: Clock, delay: OrderedDelay, send: Callable[[bytes], Awaitable[None]]):
        self.clock = clock
        self.delay = delay
        self._send = send
        self._queue: asyncio.Queue = asyncio.Queue()
        self._task = asyncio.ensure_future(self._run())
        self.closed = False

    def put(self, data: bytes, extra: float = 0.0) -> None:
        if not self.closed:
            self._queue.put_nowait((self.delay.due(self.clock.now(), extra), data))

    async def _run(self) -> None:
        while True:
            due, data = await self._queue.get()
            if data is None:
                return
            await self.clock.sleep_until(due)
            try:
                await self._send(data)
            except (ConnectionError, OSError):
                self.closed = True
                return

    async def drain_and_close(self) -> None:
        """Deliver everything already queued, then stop."""
        self._queue.put_nowait((0.0, None))
        try:
            await self._task
        except asyncio.CancelledError:
            pass

    def cancel(self) -> None:
        self.closed = True
        self._task.cancel()


class RawConn:
    """Non-blocking socket with line reads and copy-free payload skipping."""

    def __init__(self, sock: socket.socket, *, digest: bool = False, scratch: int = 1 << 18):
        sock.setblocking(False)
        self.sock = sock
        self.loop = asyncio.get_running_loop()
        self._buf = bytearray()
        self._scratch = bytearray(scratch)
        self._view = memoryview(self._scratch)
        self.rx_bytes = 0
        self.tx_bytes = 0
        self.rx_hash = hashlib.sha256() if digest else None
        self.tx_hash = hashlib.sha256() if digest else None

    @classmethod
    async def connect(cls, addr: tuple[str, int], **kw) -> "RawConn":
        sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        sock.setblocking(False)
        sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
        await asyncio.get_running_loop().sock_connect(sock, addr)
        return cls(sock, **kw)

    async def sendall(self, data, *, hashed: bool = True) -> None:
        await self.loop.sock_sendall(self.sock, data)
        self.tx_bytes += len(data)
        if self.tx_hash is not None and hashed:
            self.tx_hash.update(data)

    async def _recv(self, limit: int) -> memoryview:
        n = await self.loop.sock_recv_into(self.sock, self._view[:limit])
        if n == 0:
            raise EOFError
        got = self._view[:n]
        self.rx_bytes += n
        if self.rx_hash is not None:
            self.rx_hash.update(got)
        return got

    async def readline(self, limit: int = 1 << 16) -> bytes:
        """One line including its newline; raises EOFError at end of stream."""
        while True:
            i = self._buf.find(b"\n")
            if i >= 0:
                line = bytes(self._buf[: i + 1])
                del self._buf[: i + 1]
                return line
            if len(self._buf) > limit:
                raise ValueError("line too long")
            self._buf += await self._recv(4096)

    async def skip(self, n: int) -> None:
        take = min(n, len(self._buf))
        del self._buf[:take]
        n -= take
        while n > 0:
            got = await self._recv(min(n, len(self._scratch)))
            n -= len(got)

    def close(self) -> None:
        try:
            self.sock.close()
        except OSError:
            pass


@dataclass
class Tally:
    """Per-session byte and message accounting shared by all endpoints."""

    control_bytes: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    messages: dict[str, dict[str, int]] = field(default_factory=lambda: defaultdict(lambda: defaultdict(int)))
    payload_bytes: dict[str, int] = field(default_factory=lambda: defaultdict(int))
    data_overhead_bytes: dict[str, int] = field(default_factory=lambda: defaultdict(int))

    def control(self, session: str, kind: str, nbytes: int) -> None:
        self.control_bytes[session] += nbytes
        self.messages[session][kind] += 1

    def pop(self, session: str) -> dict:
        return {
            "control_bytes": self.control_bytes.pop(session, 0),
            "messages": dict(self.messages.pop(session, {})),
            "payload_bytes": self.payload_bytes.pop(session, 0),
            "data_overhead_bytes": self.data_overhead_bytes.pop(session, 0),
        }
