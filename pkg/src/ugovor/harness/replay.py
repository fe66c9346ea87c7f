"""Replay trace sessions across real loopback connections and report outcomes."""

from __future__ import annotations

import asyncio
import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable

from ugovor.auditor import Auditor, AuditorConfig, SessionState
from ugovor.contract import Contract
from ugovor.harness.endpoints import (
    AuditorService,
    ClientEndpoint,
    ClientOptions,
    EndpointFailure,
    ServerMonitorService,
    VideoServer,
)
from ugovor.harness.faults import FaultScript, faults_for
from ugovor.harness.net import Clock, Tally
from ugovor.harness.trace import TraceSession
from ugovor.server_monitor import ServerConfig, ServerMonitor

log = logging.getLogger(__name__)

#: deployment modes: which parties run UgoVor
MODES = ("full", "no-server", "no-client", "none")


@dataclass
class ReplayConfig:
    time_scale: float = 0.1
    concurrency: int = 48
    c: float = 0.015
    insertion_delay: float = 0.010
    seed: int = 0
    mode: str = "full"
    digest: bool = False
    settle_timeout: float = 15.0
    #: trace seconds between the starts of the first ``concurrency`` sessions
    stagger: float = 0.25
    auditor: AuditorConfig = field(default_factory=AuditorConfig)
    server: ServerConfig | None = None

    def server_config(self) -> ServerConfig:
        return self.server or ServerConfig(c=self.c)


@dataclass
class ReplayReport:
    session: str
    group: str
    engaged: bool
    outcome: str  # Close | Terminate | Unmonitored | Incomplete
    termination: dict | None
    faults: list[dict]
    trace_rebuffers: list[list[float]]
    client_rebuffers: list[list[float]]
    confirmed_rebuffers: list[dict]
    events: list[dict]
    windows: list[dict]
    client_windows: list[dict]
    server_windows: dict
    misbehavior: list[dict]
    message_counts: dict
    max_messages_per_event: int
    control_bytes: int
    payload_bytes: int
    data_overhead_bytes: int
    digests: dict
    wall_seconds: float
    duration: float

    def to_record(self) -> dict:
        return asdict(self)

    def canonical(self) -> dict:
        """The report without timing-dependent fields, for determinism checks."""
        rec = self.to_record()
        for key in ("wall_seconds", "control_bytes", "message_counts", "digests"):
            rec.pop(key)
        rec["termination"] = None if self.termination is None else {
            k: v for k, v in self.termination.items() if k in ("reason", "window")
        }
        rec["faults"] = [{k: v for k, v in f.items() if k in ("behavior", "at", "window")} for f in self.faults]
        rec["client_rebuffers"] = [r[0] for r in self.client_rebuffers]
        rec["confirmed_rebuffers"] = [r["pts"] for r in self.confirmed_rebuffers]
        rec["events"] = [
            {k: v for k, v in e.items() if k not in ("t", "latency", "duration", "evidence", "deferred", "messages")}
            for e in self.events
        ]
        rec["misbehavior"] = [m.get("reason") for m in self.misbehavior]
        return rec


def write_reports(reports: Iterable[ReplayReport], path: str | Path) -> None:
    with open(path, "w") as fh:
        for r in reports:
            fh.write(json.dumps(r.to_record(), sort_keys=True) + "\n")


def load_reports(path: str | Path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


class ReplayHarness:
    """All endpoints for a corpus replay, sharing one clock and one event loop."""

    def __init__(self, contract: Contract, config: ReplayConfig):
        self.contract = contract
        self.config = config
        self.tally = Tally()

    async def __aenter__(self) -> "ReplayHarness":
        cfg = self.config
        self.clock = Clock(cfg.time_scale)
        self.sessions: dict[str, TraceSession] = {}
        self.auditor = Auditor(self.contract, cfg.auditor)
        self.auditor_service = AuditorService(self.auditor, self.clock, self.tally)
        auditor_addr = await self.auditor_service.start()
        self.server_monitor = ServerMonitor(self.contract, lambda sid: self.sessions[sid].chunk_map(), cfg.server_config())
        self.monitor_service = ServerMonitorService(self.server_monitor, self.clock, self.tally)
        sniffer_addr = await self.monitor_service.start(auditor_addr)
        server_ugovor = cfg.mode in ("full", "no-client")
        self.video = VideoServer(
            self.sessions,
            self.clock,
            self.tally,
            contract=self.contract,
            auditor_addr=auditor_addr,
            ugovor_enabled=server_ugovor,
            monitor_service=self.monitor_service,
        )
        self.video_addr = await self.video.start(sniffer_addr if server_ugovor else None)
        return self

    async def __aexit__(self, *exc) -> None:
        await self.video.stop()
        await self.monitor_service.stop()
        await self.auditor_service.stop()

    async def run_session(self, trace: TraceSession, faults: list[FaultScript]) -> ReplayReport:
        cfg = self.config
        sid = trace.session_id
        self.sessions[sid] = trace
        self.monitor_service.add_faults(sid, [f for f in faults if f.role == "server"])
        served = self.video.expect(sid)
        options = ClientOptions(
            propose=cfg.mode in ("full", "no-server"),
            insertion_delay=cfg.insertion_delay,
            digest=cfg.digest,
            settle_timeout=cfg.settle_timeout,
        )
        client = ClientEndpoint(trace, self.clock, self.video_addr, self.tally, faults=faults, options=options, seed=cfg.seed)
        wall0 = time.perf_counter()
        await client.run()
        try:
            await asyncio.wait_for(served, timeout=max(5.0 * cfg.time_scale, 1.0))
        except asyncio.TimeoutError:
            log.warning("session %s: video server did not finish", sid)
        if client.monitor.engaged:
            # give the auditor time to process CLOSE (or whatever is in flight)
            deadline = self.clock.now() + 2.0 + trace.latency.up_base
            while self.clock.now() < deadline:
                sess = self.auditor.sessions.get(sid)
                if sess is None or sess.state is not SessionState.ACTIVE:
                    break
                await self.clock.sleep(0.05)
        report = self._report(trace, client, time.perf_counter() - wall0)
        self.auditor_service.retire(sid)
        self.monitor_service.retire(sid)
        self.video.done.pop(sid, None)
        self.sessions.pop(sid, None)
        return report

    def _report(self, trace: TraceSession, client: ClientEndpoint, wall: float) -> ReplayReport:
        sid = trace.session_id
        return build_report(
            trace,
            client.monitor,
            self.auditor.sessions.get(sid),
            self.server_monitor.sessions.get(sid),
            client_termination=client.termination,
            fault_events=client.fault_events,
            tally=self.tally.pop(sid),
            digests=client.digests,
            wall=wall,
        )


def build_report(
    trace: TraceSession,
    mon,
    aud,
    srv,
    *,
    client_termination: dict | None,
    fault_events: list[dict],
    tally: dict,
    digests: dict | None = None,
    wall: float = 0.0,
) -> ReplayReport:
    """Collect one session's outcome from the three parties' final state."""
    log_records = aud.export_log() if aud is not None else []
    events = [r for r in log_records if r["type"] == "event"]
    windows = [r for r in log_records if r["type"] == "window"]
    if not mon.engaged:
        outcome = "Unmonitored"
    elif aud is None:
        outcome = "Incomplete"
    elif aud.termination is not None:
        outcome = "Terminate"
    elif aud.state is SessionState.CLOSED:
        outcome = "Close"
    else:
        outcome = "Incomplete"
    termination = None
    if aud is not None and aud.termination is not None:
        termination = {**aud.termination, "client": client_termination}
        termination["window"] = (client_termination or {}).get("window")
        termination["client_pts"] = (client_termination or {}).get("client_pts")
    client_rebuffers = [
        [r["pts"], r["duration"]]
        for r in mon.event_log
        if r["type"] == "event" and r.get("event") == "Rebuffering" and r.get("duration") is not None and r.get("reported", True)
    ]
    confirmed = [
        {"pts": e["pts"], "client_duration": e["duration"], "bound": e["evidence"]["bound"]}
        for e in events
        if e["event"] == "Rebuffering" and e["duration"] is not None
    ]
    client_windows = [*mon.window_ledgers, mon.ledger.snapshot()] if mon.engaged else []
    server_windows = {}
    if srv is not None:
        server_windows = {
            str(w): {"level": lvl, "exhausted": ex, "rebuffer_count": srv.rebuffers.get(w, 0)}
            for w, (lvl, ex) in sorted(srv.levels.items())
        }
    misbehavior = list(aud.misbehavior) if aud is not None else []
    if srv is not None and srv.misbehavior is not None and not misbehavior:
        misbehavior = [srv.misbehavior.to_body()]
    return ReplayReport(
        session=trace.session_id,
        group=trace.group,
        engaged=mon.engaged,
        outcome=outcome,
        termination=termination,
        faults=fault_events,
        trace_rebuffers=[list(r) for r in trace.rebuffers],
        client_rebuffers=client_rebuffers,
        confirmed_rebuffers=confirmed,
        events=events,
        windows=windows,
        client_windows=client_windows,
        server_windows=server_windows,
        misbehavior=misbehavior,
        message_counts=tally["messages"],
        max_messages_per_event=max((e["messages"] for e in events), default=0),
        control_bytes=tally["control_bytes"],
        payload_bytes=tally["payload_bytes"],
        data_overhead_bytes=tally["data_overhead_bytes"],
        digests=digests or {},
        wall_seconds=wall,
        duration=trace.duration,
    )


async def replay_corpus_async(
    sessions: list[TraceSession],
    contract: Contract,
    faults: Iterable[FaultScript] = (),
    config: ReplayConfig | None = None,
) -> list[ReplayReport]:
    config = config or ReplayConfig()
    if config.mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    faults = list(faults)
    sem = asyncio.Semaphore(config.concurrency)
    async with ReplayHarness(contract, config) as harness:

        async def one(i: int, trace: TraceSession) -> ReplayReport:
            async with sem:
                if i < config.concurrency:
                    # spread the opening burst of startup fills
                    await harness.clock.sleep(i * config.stagger)
                return await harness.run_session(trace, faults_for(faults, trace.session_id))

        return list(await asyncio.gather(*(one(i, s) for i, s in enumerate(sessions))))


def replay_corpus(sessions, contract, faults=(), config=None) -> list[ReplayReport]:
    return asyncio.run(replay_corpus_async(list(sessions), contract, faults, config))


def replay(session: TraceSession, contract: Contract, faults: Iterable[FaultScript] = (), config: ReplayConfig | None = None) -> ReplayReport:
    return replay_corpus([session], contract, faults, config)[0]


__all__ = [
    "EndpointFailure",
    "build_report",
    "ReplayConfig",
    "ReplayHarness",
    "ReplayReport",
    "load_reports",
    "replay",
    "replay_corpus",
    "replay_corpus_async",
    "write_reports",
]
