"""Auditor: reconciles client claims with server verdicts.

The auditor never judges quality on its own.  It forwards each client
claim to the server monitor, and either both sides agree (the event is
logged and both monitors are told via SYNC) or the session is terminated.

Like the monitors, :class:`Auditor` is sans-IO: each entry point returns
outbound messages as ``(destination, session, kind, body)`` where the
destination is ``"client"`` or ``"server"``.
"""

from __future__ import annotations

import enum
import json
import logging
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

from ugovor.contract import EPS, Contract, WindowFrame, played_between
from ugovor.errors import ProtocolViolation, UgoVorError
from ugovor.events import EventKind, EventOfInterest

log = logging.getLogger(__name__)

Outbound = tuple[str, str, str, dict]

DISPUTE = "Dispute"
TIMEOUT = "Timeout"
PROTOCOL_ERROR = "ProtocolError"
ONE_SIDED_RESET = "OneSidedReset"
MISBEHAVIOR = "Misbehavior"


class SessionNotActive(UgoVorError):
    pass


class UnmatchedVerdict(ProtocolViolation):
    pass


class SessionState(enum.Enum):
    ACTIVE = "Active"
    TERMINATING = "Terminating"
    CLOSED = "Closed"


@dataclass
class AuditorConfig:
    reply_timeout: float = 5.0
    reset_grace: float = 1.0
    terminate_on_misbehavior: bool = True


@dataclass
class Pending:
    query_id: int
    event: EventOfInterest
    t_query: float
    deadline: float
    deferred: bool = False
    messages: int = 2  # the NOTIFY and the QUERY


@dataclass
class WindowRecord:
    window: int
    start_pts: float
    level: int = 0
    exhausted: bool = False
    rebuffer_count: int = 0
    violations: list[int] = field(default_factory=list)
    #: None when no confirmed event has revealed what was playing
    played_s: dict[str, float] | None = field(default_factory=dict)

    def to_record(self) -> dict:
        return {
            "type": "window",
            "window": self.window,
            "start_pts": self.start_pts,
            "level": self.level,
            "exhausted": self.exhausted,
            "outcome": "Exhausted" if self.exhausted else "Satisfied",
            "rebuffer_count": self.rebuffer_count,
            "violations": list(self.violations),
            "played_s": None
            if self.played_s is None
            else {k: v for k, v in sorted(self.played_s.items()) if v > EPS},
        }


@dataclass
class _ResetClaim:
    origin: str
    pts: float
    t: float


class AuditSession:
    def __init__(self, session_id: str, contract: Contract):
        self.session_id = session_id
        self.contract = contract
        self.state = SessionState.ACTIVE
        self.frame = WindowFrame(contract.window_s)
        self.windows: dict[int, WindowRecord] = {}
        self.timeline: list[tuple[float, str]] = []
        self.pending: Pending | None = None
        self.queue: deque[EventOfInterest] = deque()
        self.log: list[dict] = []
        self.termination: dict | None = None
        self.reset_claim: _ResetClaim | None = None
        self.misbehavior: list[dict] = []
        self.frontier_pts = 0.0
        self.close_pts: float | None = None
        self.close_requested = False
        self._next_query = 0

    @property
    def outcome(self) -> str:
        if self.termination is not None:
            return "Terminate"
        return "Close" if self.state is SessionState.CLOSED else "Active"

    def window(self, index: int) -> WindowRecord:
        rec = self.windows.get(index)
        if rec is None:
            rec = WindowRecord(index, self.frame.start_of(index))
            self.windows[index] = rec
        return rec

    def finalize_windows(self, end_pts: float) -> None:
        """Create records for every window up to ``end_pts`` and fill played time."""
        first = self.frame.index_of(self.frame.anchor_pts)
        last = self.frame.index_of(end_pts - EPS) if end_pts > self.frame.anchor_pts + EPS else first
        for index in range(first, last + 1):
            rec = self.window(index)
            stop = min(self.frame.end_of(index), end_pts)
            rec.played_s = played_between(self.timeline, rec.start_pts, stop) if self.timeline else None

    def export_log(self) -> list[dict]:
        out = list(self.log)
        for index in sorted(self.windows):
            out.append({"session": self.session_id, **self.windows[index].to_record()})
        if self.termination is not None:
            out.append({"session": self.session_id, "type": "terminate", **self.termination})
        elif self.state is SessionState.CLOSED:
            out.append({"session": self.session_id, "type": "close", "pts": self.close_pts})
        return out


class Auditor:
    """Multi-session auditor core."""

    def __init__(self, contract: Contract, config: AuditorConfig | None = None):
        self.contract = contract
        self.config = config or AuditorConfig()
        self.sessions: dict[str, AuditSession] = {}

    def open_session(self, session_id: str, contract: Contract | None = None) -> AuditSession:
        sess = self.sessions.get(session_id)
        if sess is None:
            sess = AuditSession(session_id, contract or self.contract)
            self.sessions[session_id] = sess
        return sess

    # -- dispatch ----------------------------------------------------------------

    def on_message(self, session_id: str, sender: str, kind: str, body: dict, now: float) -> list[Outbound]:
        sess = self.open_session(session_id)
        if sess.state is not SessionState.ACTIVE:
            if kind == "CLOSE" and sender == "client":
                sess.state = SessionState.CLOSED
                sess.close_pts = body["pts"]
            return []
        try:
            return self._dispatch(sess, sender, kind, body, now)
        except ProtocolViolation as exc:
            return self.terminate(sess, PROTOCOL_ERROR, now, detail=str(exc))

    def _dispatch(self, sess: AuditSession, sender: str, kind: str, body: dict, now: float) -> list[Outbound]:
        if kind == "HELLO":
            return []
        if sender == "client":
            if kind == "NOTIFY":
                return self.on_client_event(sess, EventOfInterest.from_body(body), now)
            if kind == "RESET":
                return self.on_reset(sess, "client", body["mode"], body["pts"], now)
            if kind == "CLOSE":
                sess.close_requested = True
                sess.close_pts = body["pts"]
                return self._maybe_close(sess)
        elif sender == "server":
            if kind == "VERDICT":
                return self.reconcile(sess, body, now)
            if kind == "RESET":
                return self.on_reset(sess, "server", body["mode"], body["pts"], now)
            if kind == "MISBEHAVIOR":
                return self.on_misbehavior(sess, body, now)
        raise ProtocolViolation(f"unexpected {kind} from {sender}")

    # -- reconciliation ------------------------------------------------------------

    def on_client_event(self, sess: AuditSession, event: EventOfInterest, now: float) -> list[Outbound]:
        if sess.state is not SessionState.ACTIVE:
            raise SessionNotActive(sess.session_id)
        sess.frontier_pts = max(sess.frontier_pts, event.pts)
        sess.queue.append(event)
        return self._next(sess, now)

    def _next(self, sess: AuditSession, now: float) -> list[Outbound]:
        if sess.pending is not None or not sess.queue or sess.reset_claim is not None:
            return self._maybe_close(sess)
        event = sess.queue.popleft()
        qid = sess._next_query
        sess._next_query += 1
        sess.pending = Pending(qid, event, now, now + self.config.reply_timeout)
        return [("server", sess.session_id, "QUERY", {"query_id": qid, **event.to_body()})]

    def reconcile(self, sess: AuditSession, body: dict, now: float) -> list[Outbound]:
        pending = sess.pending
        if pending is None or body["query_id"] != pending.query_id:
            raise UnmatchedVerdict(f"verdict for query {body['query_id']} with no such query pending")
        pending.messages += 1
        verdict = body["verdict"]
        if verdict == "Deferred":
            if not pending.deferred:
                pending.deferred = True
                pending.deadline = now + self.config.reply_timeout
            return []
        event = pending.event
        if verdict != "Confirm":
            return self.terminate(sess, DISPUTE, now, detail=event.to_body(), evidence=body["evidence"])
        sess.pending = None
        window = self._apply(sess, event, body["evidence"])
        pending.messages += 2
        sync = {
            "event": event.kind.value,
            "pts": event.pts,
            "window": window.window,
            "level": window.level,
            "exhausted": window.exhausted,
        }
        sess.log.append(
            {
                "session": sess.session_id,
                "type": "event",
                "t": now,
                **event.to_body(),
                "window": window.window,
                "verdict": "Confirm",
                "evidence": body["evidence"],
                "deferred": pending.deferred,
                "messages": pending.messages,
                "latency": now - pending.t_query,
            }
        )
        out = [("client", sess.session_id, "SYNC", sync), ("server", sess.session_id, "SYNC", dict(sync))]
        return out + self._next(sess, now)

    def _apply(self, sess: AuditSession, event: EventOfInterest, evidence: dict) -> WindowRecord:
        if event.kind is EventKind.CONTRACT_VIOLATION:
            rec = sess.window(event.window)
            rec.violations.append(event.level)
            if rec.level + 1 < sess.contract.n_levels:
                rec.level += 1
            else:
                rec.exhausted = True
            return rec
        rec = sess.window(sess.frame.index_of(event.pts))
        if event.kind is EventKind.REBUFFERING:
            rec.rebuffer_count += 1
        else:
            # the opening resolution is never an event; the server's evidence names it
            if not sess.timeline and evidence.get("previous") is not None:
                sess.timeline.append((sess.frame.anchor_pts, evidence["previous"]))
            while sess.timeline and sess.timeline[-1][0] >= event.pts - EPS:
                sess.timeline.pop()
            sess.timeline.append((event.pts, event.resolution))
        return rec

    def on_timeout(self, sess: AuditSession, now: float) -> list[Outbound]:
        return self.terminate(sess, TIMEOUT, now, detail=sess.pending.event.to_body() if sess.pending else None)

    def on_misbehavior(self, sess: AuditSession, body: dict, now: float) -> list[Outbound]:
        sess.misbehavior.append({"t": now, **body})
        sess.log.append({"session": sess.session_id, "type": "misbehavior", "t": now, **body})
        if self.config.terminate_on_misbehavior:
            return self.terminate(sess, MISBEHAVIOR, now, detail=body)
        return []

    # -- resets ----------------------------------------------------------------

    def on_reset(self, sess: AuditSession, origin: str, mode: str, pts: float, now: float) -> list[Outbound]:
        if sess.state is not SessionState.ACTIVE:
            raise SessionNotActive(sess.session_id)
        if mode == "rewind":
            if origin != "client":
                raise ProtocolViolation("only the client can request a rewind")
            # events queued before the request belong to the abandoned window
            sess.pending = None
            sess.queue.clear()
            self._restart(sess, pts, now, mode)
            return [("server", sess.session_id, "RESET", {"origin": "auditor", "mode": "trim", "pts": pts})]
        if mode != "out-of-order":
            raise ProtocolViolation(f"{origin} cannot send a {mode} reset")
        # anything in flight refers to the pre-reset buffer
        sess.pending = None
        if origin == "client":
            sess.queue.clear()
        claim = sess.reset_claim
        if claim is None:
            sess.reset_claim = _ResetClaim(origin, pts, now)
            return []
        if claim.origin != origin and abs(claim.pts - pts) <= EPS and now - claim.t <= self.config.reset_grace:
            sess.reset_claim = None
            self._restart(sess, pts, now, mode)
            return self._next(sess, now)
        return self.terminate(sess, ONE_SIDED_RESET, now, detail={"origin": claim.origin, "pts": claim.pts})

    def _restart(self, sess: AuditSession, pts: float, now: float, mode: str) -> None:
        sess.finalize_windows(sess.frontier_pts)
        sess.frame = sess.frame.restarted(pts)
        sess.timeline = []
        sess.frontier_pts = pts
        sess.log.append({"session": sess.session_id, "type": "reset", "t": now, "mode": mode, "pts": pts})

    # -- lifecycle -------------------------------------------------------------

    def terminate(self, sess: AuditSession, reason: str, now: float, detail=None, evidence=None) -> list[Outbound]:
        if sess.state is not SessionState.ACTIVE:
            return []
        sess.state = SessionState.TERMINATING
        sess.termination = {"reason": reason, "t": now, "detail": detail}
        if evidence is not None:
            sess.termination["evidence"] = evidence
        sess.finalize_windows(sess.frontier_pts)
        sess.pending = None
        sess.queue.clear()
        log.info("session %s terminated: %s", sess.session_id, reason)
        body = {"reason": reason}
        return [("client", sess.session_id, "TERMINATE", body), ("server", sess.session_id, "TERMINATE", dict(body))]

    def _maybe_close(self, sess: AuditSession) -> list[Outbound]:
        if sess.close_requested and sess.pending is None and not sess.queue and sess.reset_claim is None:
            sess.state = SessionState.CLOSED
            sess.finalize_windows(sess.close_pts)
        return []

    def tick(self, now: float) -> list[Outbound]:
        out: list[Outbound] = []
        for sess in self.sessions.values():
            if sess.state is not SessionState.ACTIVE:
                continue
            if sess.pending is not None and now >= sess.pending.deadline:
                out.extend(self.on_timeout(sess, now))
            elif sess.reset_claim is not None and now - sess.reset_claim.t > self.config.reset_grace:
                claim = sess.reset_claim
                out.extend(self.terminate(sess, ONE_SIDED_RESET, now, detail={"origin": claim.origin, "pts": claim.pts}))
        return out

    def next_deadline(self) -> float | None:
        times = []
        for sess in self.sessions.values():
            if sess.state is not SessionState.ACTIVE:
                continue
            if sess.pending is not None:
                times.append(sess.pending.deadline)
            if sess.reset_claim is not None:
                times.append(sess.reset_claim.t + self.config.reset_grace)
        return min(times, default=None)

    # -- export ----------------------------------------------------------------

    def export_log(self, session_id: str) -> list[dict]:
        return self.sessions[session_id].export_log()

    def write_logs(self, directory: str | Path) -> Path:
        """One line-delimited file per session plus an ``index.jsonl``."""
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        index = []
        for sid in sorted(self.sessions):
            sess = self.sessions[sid]
            path = directory / f"{sid}.jsonl"
            with path.open("w") as fh:
                for rec in sess.export_log():
                    fh.write(json.dumps(rec, sort_keys=True) + "\n")
            index.append(self.summary_row(sid) | {"file": path.name})
        index_path = directory / "index.jsonl"
        with index_path.open("w") as fh:
            for row in index:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
        return index_path

    def summary_row(self, session_id: str) -> dict:
        sess = self.sessions[session_id]
        return {
            "session": session_id,
            "outcome": sess.outcome,
            "reason": sess.termination["reason"] if sess.termination else None,
            "events": sum(1 for r in sess.log if r["type"] == "event"),
            "levels": [sess.windows[i].level if not sess.windows[i].exhausted else "Exhausted" for i in sorted(sess.windows)],
        }
