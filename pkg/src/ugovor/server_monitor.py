"""Server monitor: sniffed chunk metadata in, verdicts on client claims out.

The sniffer half only appends :class:`SnifferRecord` objects; everything
else (the virtual buffer, verdicts, misbehavior detection) lives in
:class:`ServerMonitor`, which is sans-IO and can run on another host.
Each entry point returns the outbound messages as ``(session, kind, body)``
triples for the transport to send to the auditor.
"""

from __future__ import annotations

import logging
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

from ugovor.contract import (
    EPOCH_STRIDE,
    EPS,
    Contract,
    SessionLedger,
    WindowFrame,
    change_list,
    level_violations,
    played_between,
)
from ugovor.errors import UgoVorError
from ugovor.virtual_buffer import (
    DEFAULT_C,
    ChunkMap,
    ChunkRecord,
    DuplicateAck,
    NonMonotoneAck,
    OutOfBuffer,
    OutOfOrderRange,
    UnknownChunk,
    VirtualBuffer,
    must_confirm_rebuffering,
    rebuffering_upper_bound,
)

log = logging.getLogger(__name__)

SERVED = "served-chunk"
ACK = "client-ack"

Outbound = tuple[str, str, dict]


class UnknownSession(UgoVorError):
    pass


@dataclass(frozen=True)
class SnifferRecord:
    session_id: str
    direction: str
    t: float
    byte_range: tuple[int, int] | None = None
    ack_chunk_id: int | None = None

    def __post_init__(self):
        if self.direction == SERVED:
            if self.byte_range is None or self.ack_chunk_id is not None:
                raise ValueError("served-chunk records carry a byte range and no chunk id")
        elif self.direction == ACK:
            if self.ack_chunk_id is None or self.byte_range is not None:
                raise ValueError("client-ack records carry a chunk id and no byte range")
        else:
            raise ValueError(f"unknown direction {self.direction!r}")

    def to_body(self) -> dict:
        if self.direction == SERVED:
            return {"direction": SERVED, "byte_range": list(self.byte_range), "t": self.t}
        return {"direction": ACK, "chunk_id": self.ack_chunk_id, "t": self.t}

    @classmethod
    def from_body(cls, session_id: str, body: dict) -> "SnifferRecord":
        if body["direction"] == SERVED:
            return cls(session_id, SERVED, body["t"], byte_range=tuple(body["byte_range"]))
        return cls(session_id, ACK, body["t"], ack_chunk_id=body["chunk_id"])


@dataclass(frozen=True)
class Verdict:
    kind: str  # Confirm | Dispute | Deferred
    evidence: dict = field(default_factory=dict)

    @property
    def final(self) -> bool:
        return self.kind != "Deferred"


@dataclass(frozen=True)
class MisbehaviorReport:
    session_id: str
    ack_throughput_bps: float
    chunk_bitrate_bps: float
    chunks: int
    reason: str = "delayed-acks"

    def to_body(self) -> dict:
        return {
            "reason": self.reason,
            "ack_throughput_bps": self.ack_throughput_bps,
            "chunk_bitrate_bps": self.chunk_bitrate_bps,
            "chunks": self.chunks,
        }


@dataclass
class ServerConfig:
    c: float = DEFAULT_C
    #: acked chunks considered by the delayed-ack detector
    window_chunks: int = 10
    #: chunk bitrate / ack throughput ratio that flags a client
    theta: float = 2.0
    #: a still-unresolved query is answered Deferred after this long
    defer_after: float = 2.5


@dataclass
class _Parked:
    query_id: int
    body: dict
    since: float
    deferred_sent: bool = False


class ServerSession:
    def __init__(self, session_id: str, chunk_map: ChunkMap, contract: Contract, config: ServerConfig):
        self.session_id = session_id
        self.contract = contract
        self.config = config
        self.vb = VirtualBuffer(chunk_map)
        self.frame = WindowFrame(contract.window_s)
        #: window index -> (level, exhausted), as synchronized by the auditor
        self.levels: dict[int, tuple[int, bool]] = {}
        self.rebuffers: dict[int, int] = {}
        self.parked: _Parked | None = None
        self.terminated: str | None = None
        self.misbehavior: MisbehaviorReport | None = None
        self.anomalies: list[str] = []
        self._acked: deque[ChunkRecord] = deque(maxlen=config.window_chunks)
        self._ack_window = None

    # -- sniffed metadata ----------------------------------------------------

    def on_served(self, rec: SnifferRecord) -> list[Outbound]:
        out: list[Outbound] = []
        try:
            self.vb.on_chunk_sent(rec.byte_range, rec.t)
        except OutOfOrderRange as exc:
            # the client jumped; start over with a fresh buffer and window
            self.vb.reset()
            self._restart(exc.info.pts)
            self.vb.on_chunk_sent(rec.byte_range, rec.t)
            out.append((self.session_id, "RESET", {"origin": "server", "mode": "out-of-order", "pts": exc.info.pts}))
        return out

    def on_ack(self, rec: SnifferRecord) -> list[Outbound]:
        if rec.ack_chunk_id < self.vb.wiped_below:
            return []
        try:
            record = self.vb.on_ack(rec.ack_chunk_id, rec.t)
        except (UnknownChunk, DuplicateAck, NonMonotoneAck, ValueError) as exc:
            self.anomalies.append(str(exc))
            log.warning("session %s: %s", self.session_id, exc)
            return []
        self._acked.append(record)
        self._trim(record)
        report = self.detect_delayed_acks()
        if report is not None and self.misbehavior is None:
            self.misbehavior = report
            return [(self.session_id, "MISBEHAVIOR", report.to_body())]
        return []

    def _trim(self, record: ChunkRecord) -> None:
        w = self.frame.index_of(record.pts)
        if w == self._ack_window:
            return
        self._ack_window = w
        # keep the window before the ack frontier's; queries may lag behind it
        keep_from = self.frame.start_of(max(w - 1, self.frame.epoch * EPOCH_STRIDE))
        if keep_from > self.frame.anchor_pts:
            self.vb.trim_before(keep_from)

    def detect_delayed_acks(self) -> MisbehaviorReport | None:
        if len(self._acked) < self.config.window_chunks:
            return None
        total_bits = 8.0 * sum(r.size for r in self._acked)
        transfer = sum(r.t_ack - r.t_send for r in self._acked)
        played = sum(r.length_s for r in self._acked)
        bitrate = total_bits / played
        if transfer <= 0:
            return None
        throughput = total_bits / transfer
        if bitrate >= self.config.theta * throughput:
            return MisbehaviorReport(self.session_id, throughput, bitrate, len(self._acked))
        return None

    # -- auditor queries -------------------------------------------------------

    def answer_query(self, body: dict) -> Verdict:
        """Verdict for a query body; a pure function of the record history."""
        kind = body["event"]
        if kind == "Rebuffering":
            return self._answer_rebuffering(body["pts"], body["duration"])
        if kind == "ResolutionChange":
            return self._answer_resolution(body["pts"], body["resolution"])
        if kind == "ContractViolation":
            return self._answer_violation(body["pts"], body["window"], body["level"], body["changes"])
        return Verdict("Dispute", {"reason": f"unknown event {kind!r}"})

    def _not_yet_sent(self, pts: float) -> bool:
        end = self.vb.end_pts
        return end is None or pts >= end - EPS

    def _answer_rebuffering(self, pts: float, duration: float | None) -> Verdict:
        try:
            a, b = self.vb.boundary(pts)
        except OutOfBuffer:
            if self._not_yet_sent(pts):
                return Verdict("Deferred", {"reason": "chunk not yet sent"})
            return Verdict("Dispute", {"reason": "no chunk boundary at pts"})
        if b is None or b.t_ack is None:
            return Verdict("Deferred", {"reason": "awaiting successor ack"})
        bound = rebuffering_upper_bound(a, b, self.config.c)
        evidence = {"a": a.chunk_id, "b": b.chunk_id, "bound": bound}
        if not must_confirm_rebuffering(a, b):
            return Verdict("Dispute", {**evidence, "reason": "successor acknowledged before underrun"})
        if duration is not None and duration > bound:
            return Verdict("Dispute", {**evidence, "reason": "duration exceeds bound"})
        return Verdict("Confirm", evidence)

    def _answer_resolution(self, pts: float, label: str) -> Verdict:
        try:
            entry = self.vb.entry_at(pts)
        except OutOfBuffer:
            if self._not_yet_sent(pts):
                return Verdict("Deferred", {"reason": "chunk not yet sent"})
            return Verdict("Dispute", {"reason": "pts outside buffer"})
        evidence = {"resolution": entry.resolution, "previous": entry.prev_resolution}
        if abs(entry.pts - pts) > EPS:
            return Verdict("Dispute", {**evidence, "reason": "pts is not a chunk boundary"})
        if entry.resolution != label or entry.prev_resolution == label:
            return Verdict("Dispute", evidence)
        return Verdict("Confirm", evidence)

    def server_changes(self, window_start: float, pts: float) -> list[list]:
        chunks = ((e.pts, e.length_s, e.resolution) for e in self.vb.chunks_from(window_start))
        return [[p, label] for p, label in change_list(chunks, window_start, pts)]

    def _answer_violation(self, pts: float, window: int, level: int, claimed: list) -> Verdict:
        if window // EPOCH_STRIDE != self.frame.epoch:
            return Verdict("Dispute", {"reason": "window from another epoch"})
        ws = self.frame.start_of(window)
        if not ws - EPS <= pts <= ws + self.contract.window_s + EPS:
            return Verdict("Dispute", {"reason": "pts outside the claimed window"})
        end = self.vb.end_pts
        if end is None or end < pts - EPS:
            # the claimed span reaches past what has been served so far
            return Verdict("Deferred", {"reason": "chunk not yet sent"})
        start = self.vb.start_pts
        if start is None or start > ws + EPS:
            return Verdict("Dispute", {"reason": "window no longer buffered"})
        changes = self.server_changes(ws, pts)
        known_level, exhausted = self.levels.get(window, (0, False))
        evidence = {"changes": changes, "level": known_level}
        if [[float(p), lab] for p, lab in claimed] != changes:
            return Verdict("Dispute", {**evidence, "reason": "change list differs"})
        if exhausted or level != known_level:
            return Verdict("Dispute", {**evidence, "reason": "level differs"})
        ledger = SessionLedger(
            window_index=window,
            level_index=level,
            played_s=played_between([tuple(c) for c in changes], ws, pts),
            rebuffer_count=self.rebuffers.get(window, 0),
            window_start_pts=ws,
        )
        reasons = level_violations(self.contract, ledger)
        if not reasons:
            return Verdict("Dispute", {**evidence, "reason": "no cap exceeded"})
        return Verdict("Confirm", {**evidence, "reasons": reasons})

    def on_query(self, body: dict, now: float) -> list[Outbound]:
        query_id = body["query_id"]
        verdict = self.answer_query(body)
        if verdict.final:
            self.parked = None
            return [self._verdict(query_id, verdict)]
        self.parked = _Parked(query_id, body, now)
        return []

    def retry_parked(self) -> list[Outbound]:
        if self.parked is None:
            return []
        verdict = self.answer_query(self.parked.body)
        if not verdict.final:
            return []
        query_id = self.parked.query_id
        self.parked = None
        return [self._verdict(query_id, verdict)]

    def tick(self, now: float) -> list[Outbound]:
        p = self.parked
        if p is None or p.deferred_sent or now - p.since < self.config.defer_after:
            return []
        p.deferred_sent = True
        verdict = self.answer_query(p.body)
        return [self._verdict(p.query_id, verdict)]

    def _verdict(self, query_id: int, verdict: Verdict) -> Outbound:
        body = {"query_id": query_id, "verdict": verdict.kind, "evidence": verdict.evidence}
        return (self.session_id, "VERDICT", body)

    # -- auditor notices -------------------------------------------------------

    def on_sync(self, body: dict) -> None:
        window = body["window"]
        self.levels[window] = (body["level"], body["exhausted"])
        if body["event"] == "Rebuffering":
            self.rebuffers[window] = self.rebuffers.get(window, 0) + 1

    def on_reset(self, body: dict) -> None:
        # out-of-order resets are detected by the sniffer itself; only a
        # client rewind relayed by the auditor needs action here
        if body["mode"] == "trim":
            self._restart(body["pts"])
            self.vb.trim_before(body["pts"])

    def _restart(self, pts: float) -> None:
        self.frame = self.frame.restarted(pts)
        self.levels.clear()
        self.rebuffers.clear()
        self.parked = None
        self._acked.clear()
        self._ack_window = None


class ServerMonitor:
    """Multi-session server monitor core."""

    def __init__(
        self,
        contract: Contract,
        chunk_map: ChunkMap | Mapping[str, ChunkMap] | Callable[[str], ChunkMap],
        config: ServerConfig | None = None,
    ):
        self.contract = contract
        self.config = config or ServerConfig()
        if isinstance(chunk_map, ChunkMap):
            self._chunk_map_for = lambda _sid, m=chunk_map: m
        elif callable(chunk_map):
            self._chunk_map_for = chunk_map
        else:
            self._chunk_map_for = chunk_map.__getitem__
        self.sessions: dict[str, ServerSession] = {}

    def session(self, session_id: str) -> ServerSession:
        try:
            return self.sessions[session_id]
        except KeyError:
            raise UnknownSession(session_id) from None

    def ingest(self, rec: SnifferRecord) -> list[Outbound]:
        sess = self.sessions.get(rec.session_id)
        if sess is None:
            if rec.direction != SERVED:
                raise UnknownSession(rec.session_id)
            sess = ServerSession(rec.session_id, self._chunk_map_for(rec.session_id), self.contract, self.config)
            self.sessions[rec.session_id] = sess
        if sess.terminated:
            return []
        out = sess.on_served(rec) if rec.direction == SERVED else sess.on_ack(rec)
        return out + sess.retry_parked()

    def answer_query(self, session_id: str, body: dict) -> Verdict:
        return self.session(session_id).answer_query(body)

    def on_message(self, session_id: str, kind: str, body: dict, now: float) -> list[Outbound]:
        if kind == "RECORD":
            return self.ingest(SnifferRecord.from_body(session_id, body))
        sess = self.sessions.get(session_id)
        if kind == "QUERY":
            if sess is None:
                # nothing was ever served for this session
                return [(session_id, "VERDICT", {"query_id": body["query_id"], "verdict": "Dispute",
                                                 "evidence": {"reason": "unknown session"}})]
            return sess.on_query(body, now)
        if sess is None:
            return []
        if kind == "SYNC":
            sess.on_sync(body)
        elif kind == "RESET":
            sess.on_reset(body)
        elif kind == "TERMINATE":
            sess.terminated = body["reason"]
            sess.parked = None
        return []

    def tick(self, now: float) -> list[Outbound]:
        out: list[Outbound] = []
        for sess in self.sessions.values():
            out.extend(sess.tick(now))
        return out
