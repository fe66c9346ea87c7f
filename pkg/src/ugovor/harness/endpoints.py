"""Protocol endpoints for loopback replays.

* :class:`VideoServer` streams dummy payloads on the trace's schedule and
  embeds the sniffer, which forwards chunk and ack metadata to the server
  monitor over the framed wire protocol.
* :class:`ServerMonitorService` and :class:`AuditorService` wrap the
  sans-IO cores with TCP listeners.
* :class:`ClientEndpoint` plays one session: it reads the data stream,
  emulates the player, runs the client monitor and talks to the auditor.

Link latency is applied at the client for both directions of its links
(ordered, constant plus jitter), so the servers need no per-client state.
"""

from __future__ import annotations

import asyncio
import heapq
import itertools
import logging
import random
import socket
from dataclasses import dataclass

from ugovor import wire
from ugovor.auditor import PROTOCOL_ERROR, Auditor, SessionState
from ugovor.client_monitor import ClientMonitor, ReceivedChunk
from ugovor.contract import Contract
from ugovor.errors import ProtocolViolation, UgoVorError
from ugovor.harness.faults import FaultScript, VerdictTamper, apply_client_fault
from ugovor.harness.net import Clock, DelayedSender, OrderedDelay, RawConn, Tally
from ugovor.harness.trace import TraceSession
from ugovor.server_monitor import ServerMonitor

log = logging.getLogger(__name__)

LOOPBACK = "127.0.0.1"
_ZEROS = memoryview(bytes(4 << 20))


class EndpointFailure(UgoVorError):
    """Infrastructure failure in the harness, not a protocol outcome."""


async def _listen_raw(
    handler, host: str = LOOPBACK, port: int = 0
) -> tuple[socket.socket, asyncio.Task, tuple[str, int]]:
    lsock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    lsock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
    lsock.bind((host, port))
    lsock.listen(1024)
    lsock.setblocking(False)
    loop = asyncio.get_running_loop()

    async def accept_loop():
        while True:
            sock, _ = await loop.sock_accept(lsock)
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            asyncio.ensure_future(handler(sock))

    return lsock, asyncio.ensure_future(accept_loop()), lsock.getsockname()[:2]


class _FramedPeer:
    """A framed connection with sequence stamping and byte accounting."""

    def __init__(self, writer: asyncio.StreamWriter, tally: Tally, sender: wire.Sender | None = None):
        self.writer = writer
        self.tally = tally
        self.sender = sender or wire.Sender()

    def send(self, session: str, kind: str, body: dict) -> None:
        frame = wire.encode(self.sender.make(session, kind, body))
        self.tally.control(session, kind, len(frame))
        if not self.writer.is_closing():
            self.writer.write(frame)


# -- auditor -----------------------------------------------------------------------


class AuditorService:
    def __init__(self, auditor: Auditor, clock: Clock, tally: Tally, tick: float = 0.1):
        self.auditor = auditor
        self.clock = clock
        self.tally = tally
        self.tick = tick
        self.sender = wire.Sender()
        self.seq = wire.SeqTracker()
        self.clients: dict[str, _FramedPeer] = {}
        self.server: _FramedPeer | None = None
        self.retired: set[str] = set()
        self._server_obj = None
        self._tasks: list[asyncio.Task] = []

    async def start(self, host: str = LOOPBACK, port: int = 0) -> tuple[str, int]:
        self._server_obj = await asyncio.start_server(self._handle, host, port)
        self._tasks.append(asyncio.ensure_future(self._ticker()))
        return self._server_obj.sockets[0].getsockname()[:2]

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        self._server_obj.close()

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            hello = await wire.read_message(reader)
            if hello is None or hello.kind != "HELLO":
                writer.close()
                return
            role = hello.body["role"]
            peer = _FramedPeer(writer, self.tally, self.sender)
            if role == "client":
                self.clients[hello.session_id] = peer
                self._dispatch(hello, "client")
            elif role == "server":
                self.server = peer
            while True:
                msg = await wire.read_message(reader)
                if msg is None:
                    break
                self._dispatch(msg, role)
        except (wire.WireError, ConnectionError) as exc:
            log.warning("auditor connection error: %s", exc)
        finally:
            writer.close()

    def _dispatch(self, msg: wire.WireMessage, role: str) -> None:
        if msg.session_id in self.retired:
            return
        now = self.clock.now()
        try:
            self.seq.check(msg, role)
        except ProtocolViolation as exc:
            sess = self.auditor.open_session(msg.session_id)
            self._send(self.auditor.terminate(sess, PROTOCOL_ERROR, now, detail=str(exc)))
            return
        self._send(self.auditor.on_message(msg.session_id, role, msg.kind, msg.body, now))

    def _send(self, out) -> None:
        for dest, sid, kind, body in out:
            peer = self.clients.get(sid) if dest == "client" else self.server
            if peer is not None:
                peer.send(sid, kind, body)

    async def _ticker(self) -> None:
        while True:
            await self.clock.sleep(self.tick)
            self._send(self.auditor.tick(self.clock.now()))

    def retire(self, sid: str) -> None:
        self.retired.add(sid)
        self.clients.pop(sid, None)
        self.auditor.sessions.pop(sid, None)


# -- server monitor --------------------------------------------------------------


class ServerMonitorService:
    def __init__(self, monitor: ServerMonitor, clock: Clock, tally: Tally, tick: float = 0.1):
        self.monitor = monitor
        self.clock = clock
        self.tally = tally
        self.tick = tick
        self.auditor: _FramedPeer | None = None
        self.retired: set[str] = set()
        self.session_start: dict[str, float] = {}
        self.faults: dict[str, VerdictTamper] = {}
        self.fault_log: list[dict] = []
        self._server_obj = None
        self._tasks: list[asyncio.Task] = []

    async def start(self, auditor_addr: tuple[str, int], host: str = LOOPBACK, port: int = 0) -> tuple[str, int]:
        reader, writer = await asyncio.open_connection(*auditor_addr)
        self.auditor = _FramedPeer(writer, self.tally)
        self.auditor.send("*", "HELLO", {"role": "server"})
        self._tasks.append(asyncio.ensure_future(self._auditor_reader(reader)))
        self._tasks.append(asyncio.ensure_future(self._ticker()))
        self._server_obj = await asyncio.start_server(self._sniffer_conn, host, port)
        return self._server_obj.sockets[0].getsockname()[:2]

    async def stop(self) -> None:
        for t in self._tasks:
            t.cancel()
        self._server_obj.close()
        self.auditor.writer.close()

    def add_faults(self, sid: str, scripts: list[FaultScript]) -> None:
        tamper = VerdictTamper(scripts)
        if tamper.scripts:
            self.faults[sid] = tamper

    async def _sniffer_conn(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                msg = await wire.read_message(reader)
                if msg is None:
                    break
                if msg.kind == "RECORD":
                    self._handle(msg.session_id, msg.kind, msg.body)
        except (wire.WireError, ConnectionError) as exc:
            log.warning("sniffer connection error: %s", exc)
        finally:
            writer.close()

    async def _auditor_reader(self, reader: asyncio.StreamReader) -> None:
        while True:
            msg = await wire.read_message(reader)
            if msg is None:
                return
            self._handle(msg.session_id, msg.kind, msg.body)

    def _handle(self, sid: str, kind: str, body: dict) -> None:
        if sid in self.retired:
            return
        try:
            out = self.monitor.on_message(sid, kind, body, self.clock.now())
        except UgoVorError as exc:
            log.warning("server monitor, session %s: %s", sid, exc)
            return
        self._send(out)

    def _send(self, out) -> None:
        for sid, kind, body in out:
            if kind == "VERDICT":
                body = self._apply_faults(sid, body)
                if body is None:
                    continue
            self.auditor.send(sid, kind, body)

    def _apply_faults(self, sid: str, body: dict) -> dict | None:
        tamper = self.faults.get(sid)
        if tamper is None:
            return body
        start = self.session_start.get(sid)
        before = len(tamper.log)
        out = tamper.apply(body, None if start is None else self.clock.now() - start)
        self.fault_log.extend({"session": sid, **entry} for entry in tamper.log[before:])
        return out

    async def _ticker(self) -> None:
        while True:
            await self.clock.sleep(self.tick)
            self._send(self.monitor.tick(self.clock.now()))

    def retire(self, sid: str) -> None:
        self.retired.add(sid)
        self.monitor.sessions.pop(sid, None)
        self.faults.pop(sid, None)
        self.session_start.pop(sid, None)


# -- video server ------------------------------------------------------------------


class VideoServer:
    """Streams each trace session's chunks as dummy payloads.

    Request: ``GET /stream/<session> HTTP/1.1`` plus headers.  Response:
    status line and headers, then per chunk a ``CHUNK`` line followed by
    ``size`` zero bytes, and finally ``END``.  The client answers each chunk
    with an ``ACK <id>`` line.
    """

    def __init__(
        self,
        sessions: dict[str, TraceSession],
        clock: Clock,
        tally: Tally,
        *,
        contract: Contract | None = None,
        auditor_addr: tuple[str, int] | None = None,
        ugovor_enabled: bool = True,
        monitor_service: ServerMonitorService | None = None,
    ):
        self.sessions = sessions
        self.clock = clock
        self.tally = tally
        self.contract = contract
        self.auditor_addr = auditor_addr
        self.ugovor_enabled = ugovor_enabled
        self.monitor_service = monitor_service
        self.done: dict[str, asyncio.Future] = {}
        self._sniffer: _FramedPeer | None = None
        self._lsock = None
        self._accept = None

    async def start(
        self, sniffer_addr: tuple[str, int] | None = None, host: str = LOOPBACK, port: int = 0
    ) -> tuple[str, int]:
        if sniffer_addr is not None:
            _, writer = await asyncio.open_connection(*sniffer_addr)
            self._sniffer = _FramedPeer(writer, self.tally)
        self._lsock, self._accept, addr = await _listen_raw(self._serve, host, port)
        return addr

    async def stop(self) -> None:
        self._accept.cancel()
        self._lsock.close()
        if self._sniffer is not None:
            self._sniffer.writer.close()

    def expect(self, sid: str) -> asyncio.Future:
        fut = asyncio.get_running_loop().create_future()
        self.done[sid] = fut
        return fut

    async def _serve(self, sock: socket.socket) -> None:
        conn = RawConn(sock)
        sid = None
        try:
            request = (await conn.readline()).decode("latin-1").split()
            headers = {}
            while True:
                line = (await conn.readline()).decode("latin-1").strip()
                if not line:
                    break
                name, _, value = line.partition(":")
                headers[name.strip()] = value.strip()
            sid = request[1].rsplit("/", 1)[-1]
            trace = self.sessions[sid]
            await self._stream(conn, sid, trace, headers)
        except (EOFError, ConnectionError, OSError, KeyError, IndexError) as exc:
            log.debug("video connection for %s ended: %r", sid, exc)
        finally:
            conn.close()
            fut = self.done.get(sid)
            if fut is not None and not fut.done():
                fut.set_result(True)

    async def _stream(self, conn: RawConn, sid: str, trace: TraceSession, headers: dict) -> None:
        start = self.clock.now()
        engaged = self.ugovor_enabled and wire.proposes(headers) and self.contract is not None
        if self.monitor_service is not None:
            self.monitor_service.session_start[sid] = start
        response = "HTTP/1.1 200 OK\r\nContent-Type: video/mp4\r\n"
        extra = ""
        if engaged:
            extra = "".join(f"{k}: {v}\r\n" for k, v in wire.server_headers(self.contract, self.auditor_addr).items())
            self.tally.control_bytes[sid] += len(extra)
        head = (response + extra + "\r\n").encode("latin-1")
        await conn.sendall(head)
        self.tally.data_overhead_bytes[sid] += len(head) - len(extra)
        sniff = engaged and self._sniffer is not None
        acks = asyncio.ensure_future(self._read_acks(conn, sid, sniff))
        try:
            for (b0, b1), chunk in zip(trace.byte_ranges(), trace.chunks):
                delay = (start + chunk.t_send - self.clock.now()) * self.clock.scale
                if delay > 0:
                    # wake early if the client hangs up
                    await asyncio.wait({acks}, timeout=delay)
                if acks.done():
                    return  # the client went away
                if sniff:
                    self._sniffer.send(sid, "RECORD", {"direction": "served-chunk", "byte_range": [b0, b1], "t": self.clock.now()})
                line = f"CHUNK {chunk.chunk_id} {b0} {b1} {chunk.resolution} {chunk.pts!r} {chunk.length!r} {chunk.size}\n"
                await conn.sendall(line.encode())
                await self._send_payload(conn, chunk.size)
                self.tally.payload_bytes[sid] += chunk.size
                self.tally.data_overhead_bytes[sid] += len(line)
            await conn.sendall(b"END\n")
            self.tally.data_overhead_bytes[sid] += 4
            await acks
        finally:
            acks.cancel()

    async def _send_payload(self, conn: RawConn, size: int) -> None:
        while size > 0:
            n = min(size, len(_ZEROS))
            await conn.sendall(_ZEROS[:n])
            size -= n

    async def _read_acks(self, conn: RawConn, sid: str, sniff: bool) -> None:
        try:
            while True:
                line = await conn.readline()
                self.tally.data_overhead_bytes[sid] += len(line)
                parts = line.split()
                if len(parts) == 2 and parts[0] == b"ACK" and sniff:
                    self._sniffer.send(sid, "RECORD", {"direction": "client-ack", "chunk_id": int(parts[1]), "t": self.clock.now()})
        except (EOFError, ConnectionError, OSError):
            return


# -- client --------------------------------------------------------------------------


@dataclass
class ClientOptions:
    propose: bool = True
    insertion_delay: float = 0.010
    digest: bool = False
    settle_timeout: float = 15.0
    control_latency: bool = True


class ClientEndpoint:
    def __init__(
        self,
        trace: TraceSession,
        clock: Clock,
        video_addr: tuple[str, int],
        tally: Tally,
        *,
        faults: list[FaultScript] = (),
        options: ClientOptions | None = None,
        seed: int = 0,
    ):
        self.trace = trace
        self.sid = trace.session_id
        self.clock = clock
        self.video_addr = video_addr
        self.tally = tally
        self.options = options or ClientOptions()
        rng = random.Random(f"{seed}:{self.sid}")
        lat = trace.latency
        self.down_data = OrderedDelay(lat.down_base, lat.down_jitter, rng)
        self.up_data = OrderedDelay(lat.up_base, lat.up_jitter, rng)
        self.down_ctrl = OrderedDelay(lat.down_base, lat.down_jitter, rng)
        self.up_ctrl = OrderedDelay(lat.up_base, lat.up_jitter, rng)
        self.monitor = ClientMonitor(self.sid, insertion_delay=self.options.insertion_delay)
        self.faults = sorted(faults, key=lambda f: f.at)
        self.fault_events: list[dict] = []
        self.termination: dict | None = None
        self.ack_extra = 0.0
        self.closed_cleanly = False
        self.digests: dict[str, str] = {}
        self._inbox: list = []
        self._counter = itertools.count()
        self._wake = asyncio.Event()
        self._start = 0.0
        self._control: DelayedSender | None = None
        self._writer: asyncio.StreamWriter | None = None
        self._sender = wire.Sender()
        self._eof = False

    def _t(self) -> float:
        return self.clock.now() - self._start

    def _push(self, due: float, kind: str, item) -> None:
        heapq.heappush(self._inbox, (due, next(self._counter), kind, item))
        self._wake.set()

    async def run(self) -> "ClientEndpoint":
        self._start = self.clock.now()
        conn = await RawConn.connect(self.video_addr, digest=self.options.digest)
        await conn.sendall(f"GET /stream/{self.sid} HTTP/1.1\r\nHost: video\r\n".encode())
        if self.options.propose:
            await conn.sendall(f"{wire.HEADER_PROPOSE}: 1\r\n".encode(), hashed=False)
        await conn.sendall(b"\r\n")
        await conn.readline()  # status line
        headers = {}
        while True:
            line = (await conn.readline()).decode("latin-1").strip()
            if not line:
                break
            name, _, value = line.partition(":")
            headers[name.strip()] = value.strip()
        engaged = self.options.propose and self.monitor.bootstrap(headers)
        tasks = []
        if engaged:
            reader, self._writer = await asyncio.open_connection(*self.monitor.auditor)
            self._control = DelayedSender(self.clock, self.up_ctrl, self._write_control)
            self._send_control("HELLO", {"role": "client"})
            tasks.append(asyncio.ensure_future(self._control_reader(reader)))
        acks = DelayedSender(self.clock, self.up_data, conn.sendall)
        tasks.append(asyncio.ensure_future(self._data_reader(conn)))
        try:
            await self._main(acks)
        finally:
            for t in tasks:
                t.cancel()
            if self._control is not None:
                await self._control.drain_and_close()
            acks.cancel()
            if self._writer is not None:
                self._writer.close()
            if self.options.digest:
                self.digests = {
                    "down": conn.rx_hash.hexdigest(),
                    "up": conn.tx_hash.hexdigest(),
                    "down_bytes": conn.rx_bytes,
                    "up_bytes": conn.tx_bytes,
                }
            conn.close()
        return self

    async def _write_control(self, frame: bytes) -> None:
        self._writer.write(frame)
        await self._writer.drain()

    def _send_control(self, kind: str, body: dict) -> None:
        frame = wire.encode(self._sender.make(self.sid, kind, body))
        self.tally.control(self.sid, kind, len(frame))
        self._control.put(frame)

    async def _data_reader(self, conn: RawConn) -> None:
        try:
            while True:
                line = await conn.readline()
                if line.startswith(b"CHUNK "):
                    _, cid, b0, b1, res, pts, length, size = line.split()
                    await conn.skip(int(size))
                    chunk = ReceivedChunk(int(cid), float(pts), float(length), res.decode(), (int(b0), int(b1)))
                    due = self.down_data.due(self.clock.now())
                    # the transport acks on arrival; the player sees it no earlier than startup
                    self._push(due, "ack", chunk.chunk_id)
                    self._push(max(due, self._start + self.trace.startup), "chunk", chunk)
                elif line == b"END\n":
                    self._push(max(self.down_data.due(self.clock.now()), self._start + self.trace.startup), "end", None)
                    return
        except (EOFError, ConnectionError, OSError):
            self._push(self.clock.now(), "eof", None)

    async def _control_reader(self, reader: asyncio.StreamReader) -> None:
        try:
            while True:
                msg = await wire.read_message(reader)
                if msg is None:
                    return
                self._push(self.down_ctrl.due(self.clock.now()), "msg", msg)
        except (wire.WireError, ConnectionError):
            return

    async def _main(self, acks: DelayedSender) -> None:
        player = self.monitor.player
        finished_at = None
        close_sent = False
        pending_faults = list(self.faults)
        while True:
            now = self.clock.now()
            while self._inbox and self._inbox[0][0] <= now:
                _, _, kind, item = heapq.heappop(self._inbox)
                if kind == "ack":
                    acks.put(f"ACK {item}\n".encode(), extra=self.ack_extra)
                elif kind == "chunk":
                    self.monitor.on_chunk_received(item, self.clock.now())
                elif kind == "end":
                    self.monitor.end_of_stream()
                elif kind == "eof":
                    self._eof = True
                elif kind == "msg":
                    self._on_control(item)
            if self.termination is not None:
                return
            while pending_faults and self._t() >= pending_faults[0].at:
                self._activate(pending_faults.pop(0))
            self.monitor.advance_to(now)
            self._flush()
            if player.finished and finished_at is None:
                finished_at = now
            if finished_at is not None and not close_sent:
                settled = not self.monitor.engaged or not self.monitor.unsettled
                if settled or now - finished_at > self.options.settle_timeout:
                    if self.monitor.engaged:
                        self.monitor.close()
                        self._flush()
                    close_sent = True
                    self.closed_cleanly = settled
                    return
            if self._eof and not player.finished and not self._inbox and not player.playing:
                raise EndpointFailure(f"session {self.sid}: video stream ended prematurely")
            wake = [self._inbox[0][0]] if self._inbox else []
            deadline = player.next_deadline()
            if deadline is not None:
                wake.append(deadline)
            if pending_faults:
                wake.append(self._start + pending_faults[0].at)
            if finished_at is not None:
                wake.append(finished_at + self.options.settle_timeout)
            await self._sleep_until(max(min(wake, default=now + 1.0), now + 1e-4))

    async def _sleep_until(self, t: float) -> None:
        if self._wake.is_set():
            self._wake.clear()
            return
        handle = self.clock.call_at(t, self._wake.set)
        await self._wake.wait()
        handle.cancel()
        self._wake.clear()

    def _flush(self) -> None:
        outbox = self.monitor.outbox
        while outbox:
            kind, body = outbox.pop(0)
            if self._control is not None:
                self._send_control(kind, body)

    def _on_control(self, msg: wire.WireMessage) -> None:
        if msg.kind == "SYNC":
            self.monitor.on_sync(msg.body)
        elif msg.kind == "TERMINATE":
            self.monitor.on_terminate(msg.body["reason"])
            pts = self.monitor.player.playhead_pts
            self.termination = {
                "reason": msg.body["reason"],
                "t": self._t(),
                "client_pts": pts,
                "window": self.monitor.frame.index_of(pts) if self.monitor.frame else None,
            }

    def _activate(self, fault: FaultScript) -> None:
        pts = self.monitor.player.playhead_pts
        window = self.monitor.frame.index_of(pts) if self.monitor.frame else None
        self.fault_events.append({"behavior": fault.behavior, "at": fault.at, "t": self._t(), "pts": pts, "window": window})
        extra = apply_client_fault(self.monitor, fault)
        if extra is not None:
            self.ack_extra = extra

    def auditor_closed(self, auditor: Auditor) -> bool:
        sess = auditor.sessions.get(self.sid)
        return sess is None or sess.state is not SessionState.ACTIVE
