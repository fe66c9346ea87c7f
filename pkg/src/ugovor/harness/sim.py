"""In-process discrete-event replay of one session.

The three sans-IO cores are driven on a virtual clock with the trace's
latency profile, without sockets or payload bytes.  It is exact and fast,
which makes it the workhorse for property tests and micro-benchmarks; the
socket harness in :mod:`ugovor.harness.replay` is the end-to-end check.
"""

from __future__ import annotations

import heapq
import itertools
import random
import time
from dataclasses import dataclass, field
from typing import Callable, Iterable

from ugovor import wire
from ugovor.auditor import Auditor, AuditorConfig, SessionState
from ugovor.client_monitor import ClientMonitor, ReceivedChunk
from ugovor.contract import Contract
from ugovor.harness.faults import FaultScript, VerdictTamper, apply_client_fault
from ugovor.harness.net import OrderedDelay, Tally
from ugovor.harness.replay import ReplayReport, build_report
from ugovor.harness.trace import TraceSession
from ugovor.server_monitor import ServerConfig, ServerMonitor

#: one-way delay between the server monitor and the auditor (same site)
BACKEND_DELAY = 0.001


@dataclass
class SimConfig:
    c: float = 0.015
    insertion_delay: float = 0.010
    seed: int = 0
    tick: float = 0.1
    settle_timeout: float = 15.0
    auditor: AuditorConfig = field(default_factory=AuditorConfig)
    server: ServerConfig | None = None


class _Loop:
    def __init__(self):
        self.now = 0.0
        self._heap: list = []
        self._seq = itertools.count()

    def at(self, t: float, fn: Callable[[], None]) -> None:
        heapq.heappush(self._heap, (max(t, self.now), next(self._seq), fn))

    def run(self, stop: Callable[[], bool]) -> None:
        while self._heap and not stop():
            self.now, _, fn = heapq.heappop(self._heap)
            fn()


class SessionSim:
    """One session's client, server monitor and auditor on a virtual clock."""

    def __init__(
        self, trace: TraceSession, contract: Contract, faults: Iterable[FaultScript] = (), config: SimConfig | None = None
    ):
        self.trace = trace
        self.contract = contract
        self.config = cfg = config or SimConfig()
        self.sid = trace.session_id
        self.loop = _Loop()
        self.tally = Tally()
        rng = random.Random(f"{cfg.seed}:{self.sid}")
        lat = trace.latency
        self.down_data = OrderedDelay(lat.down_base, lat.down_jitter, rng)
        self.up_data = OrderedDelay(lat.up_base, lat.up_jitter, rng)
        self.down_ctrl = OrderedDelay(lat.down_base, lat.down_jitter, rng)
        self.up_ctrl = OrderedDelay(lat.up_base, lat.up_jitter, rng)
        self.monitor = ClientMonitor(self.sid, insertion_delay=cfg.insertion_delay)
        self.server = ServerMonitor(contract, {self.sid: trace.chunk_map()}, cfg.server or ServerConfig(c=cfg.c))
        self.auditor = Auditor(contract, cfg.auditor)
        self.faults = sorted(faults, key=lambda f: f.at)
        self.tamper = VerdictTamper(self.faults)
        self.fault_events: list[dict] = []
        self.ack_extra = 0.0
        self.termination: dict | None = None
        self.finished_at: float | None = None
        self.closed = False
        self._senders = {"client": wire.Sender(), "server": wire.Sender(), "auditor": wire.Sender()}
        self._next_wake: float | None = None

    # -- plumbing ------------------------------------------------------------

    def _count(self, party: str, kind: str, body: dict) -> None:
        frame = wire.encode(self._senders[party].make(self.sid, kind, body))
        self.tally.control(self.sid, kind, len(frame))

    def _to_auditor(self, sender: str, kind: str, body: dict, t: float) -> None:
        self._count(sender, kind, body)
        self.loop.at(t, lambda: self._auditor_in(sender, kind, body))

    def _auditor_in(self, sender: str, kind: str, body: dict) -> None:
        self._route(self.auditor.on_message(self.sid, sender, kind, body, self.loop.now))

    def _route(self, out) -> None:
        now = self.loop.now
        for dest, _sid, kind, body in out:
            self._count("auditor", kind, body)
            if dest == "client":
                self.loop.at(self.down_ctrl.due(now), lambda k=kind, b=body: self._client_ctrl(k, b))
            else:
                self.loop.at(now + BACKEND_DELAY, lambda k=kind, b=body: self._server_in(k, b))

    def _server_in(self, kind: str, body: dict) -> None:
        self._server_out(self.server.on_message(self.sid, kind, body, self.loop.now))

    def _server_out(self, out) -> None:
        now = self.loop.now
        for _sid, kind, body in out:
            if kind == "VERDICT":
                body = self.tamper.apply(body, now)
                if body is None:
                    continue
            self._to_auditor("server", kind, body, now + BACKEND_DELAY)

    def _record(self, body: dict) -> None:
        self._server_out(self.server.on_message(self.sid, "RECORD", body, self.loop.now))

    # -- client --------------------------------------------------------------

    def _client_ctrl(self, kind: str, body: dict) -> None:
        if self.termination is not None:
            return
        if kind == "SYNC":
            self.monitor.on_sync(body)
        elif kind == "TERMINATE":
            self.monitor.on_terminate(body["reason"])
            pts = self.monitor.player.playhead_pts
            self.termination = {
                "reason": body["reason"],
                "t": self.loop.now,
                "client_pts": pts,
                "window": self.monitor.frame.index_of(pts) if self.monitor.frame else None,
            }
        self._client_step()

    def _client_chunk(self, chunk: ReceivedChunk) -> None:
        if self.termination is None:
            self.monitor.on_chunk_received(chunk, self.loop.now)
            self._client_step()

    def _client_ack(self, chunk_id: int) -> None:
        if self.termination is None:
            t = self.up_data.due(self.loop.now, self.ack_extra)
            self.loop.at(t, lambda: self._record({"direction": "client-ack", "chunk_id": chunk_id, "t": self.loop.now}))

    def _client_end(self) -> None:
        if self.termination is None:
            self.monitor.end_of_stream()
            self._client_step()

    def _fault(self, fault: FaultScript) -> None:
        if self.termination is not None:
            return
        pts = self.monitor.player.playhead_pts
        window = self.monitor.frame.index_of(pts) if self.monitor.frame else None
        self.fault_events.append({"behavior": fault.behavior, "at": fault.at, "t": self.loop.now, "pts": pts, "window": window})
        extra = apply_client_fault(self.monitor, fault)
        if extra is not None:
            self.ack_extra = extra
        self._client_step()

    def _client_step(self) -> None:
        if self.termination is not None or self.closed:
            return
        now = self.loop.now
        self.monitor.advance_to(now)
        self._flush()
        player = self.monitor.player
        if player.finished and self.finished_at is None:
            self.finished_at = now
            self.loop.at(now + self.config.settle_timeout, self._client_step)
        if self.finished_at is not None:
            settled = not self.monitor.unsettled
            if settled or now - self.finished_at >= self.config.settle_timeout - 1e-9:
                self.monitor.close()
                self._flush()
                self.closed = True
                return
        deadline = player.next_deadline()
        if deadline is not None:
            # an underrun due right now registers only once time moves on
            wake = max(deadline, now + 1e-6)
            if wake != self._next_wake:
                self._next_wake = wake
                self.loop.at(wake, self._client_step)

    def _flush(self) -> None:
        outbox = self.monitor.outbox
        while outbox:
            kind, body = outbox.pop(0)
            self._to_auditor("client", kind, body, self.up_ctrl.due(self.loop.now))

    # -- schedule ------------------------------------------------------------

    def _ticker(self) -> None:
        if self._done():
            return
        now = self.loop.now
        self._route(self.auditor.tick(now))
        self._server_out(self.server.tick(now))
        self.loop.at(now + self.config.tick, self._ticker)

    def _done(self) -> bool:
        if self.loop.now > self._horizon:
            return True
        sess = self.auditor.sessions.get(self.sid)
        if sess is not None and sess.state is not SessionState.ACTIVE:
            return self.closed or self.termination is not None
        return False

    def run(self) -> ReplayReport:
        wall0 = time.perf_counter()
        loop, trace = self.loop, self.trace
        if self.monitor.bootstrap(wire.server_headers(self.contract, ("127.0.0.1", 9))):
            self._to_auditor("client", "HELLO", {"role": "client"}, self.up_ctrl.due(0.0))
        hold = trace.startup
        # a generous cap so a wedged session cannot spin forever
        self._horizon = (trace.chunks[-1].t_send if trace.chunks else 0.0) + trace.duration + 600.0
        last = 0.0
        for (b0, b1), c in zip(trace.byte_ranges(), trace.chunks):
            loop.at(c.t_send, lambda r=[b0, b1], t=c.t_send: self._record({"direction": "served-chunk", "byte_range": r, "t": t}))
            due = self.down_data.due(c.t_send)
            chunk = ReceivedChunk(c.chunk_id, c.pts, c.length, c.resolution, (b0, b1))
            loop.at(due, lambda cid=c.chunk_id: self._client_ack(cid))
            loop.at(max(due, hold), lambda ch=chunk: self._client_chunk(ch))
            last = max(due, hold)
            self.tally.payload_bytes[self.sid] += c.size
        loop.at(last, self._client_end)
        for f in self.faults:
            # server-side faults are only logged here; the tamper acts on verdicts
            loop.at(f.at, lambda f=f: self._fault(f))
        loop.at(self.config.tick, self._ticker)
        loop.run(self._done)
        return build_report(
            trace,
            self.monitor,
            self.auditor.sessions.get(self.sid),
            self.server.sessions.get(self.sid),
            client_termination=self.termination,
            fault_events=self.fault_events,
            tally=self.tally.pop(self.sid),
            wall=time.perf_counter() - wall0,
        )


def simulate(
    trace: TraceSession, contract: Contract, faults: Iterable[FaultScript] = (), config: SimConfig | None = None
) -> ReplayReport:
    return SessionSim(trace, contract, faults, config).run()


__all__ = ["BACKEND_DELAY", "SessionSim", "SimConfig", "simulate"]
