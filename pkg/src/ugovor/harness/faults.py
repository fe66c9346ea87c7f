"""Fault scripts: scripted dishonesty injected into a replay.

File format, one JSON object per line::

    {"role": "client", "behavior": "FabricateEvent", "at": 31.0,
     "params": {"kind": "Rebuffering", "pts": 28.0, "duration": 2.0}}

``at`` is the activation time in seconds from the start of the session.
An optional ``"session"`` key restricts an entry to one session.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from ugovor.errors import UgoVorError
from ugovor.events import EventOfInterest
from ugovor.harness.generate import INSERTION_DELAY
from ugovor.harness.trace import TraceSession

BEHAVIOR_ROLES = {
    "FabricateEvent": "client",
    "DenyEvent": "server",
    "DelayAcks": "client",
    "DropVerdict": "server",
    "OneSidedReset": "client",
}

DEFAULT_EXTRA_ACK_DELAY = 6.0


class FaultError(UgoVorError):
    pass


@dataclass(frozen=True)
class FaultScript:
    role: str
    behavior: str
    at: float
    params: dict = field(default_factory=dict)
    session: str | None = None

    def __post_init__(self):
        expected = BEHAVIOR_ROLES.get(self.behavior)
        if expected is None:
            raise FaultError(f"unknown behavior {self.behavior!r}")
        if self.role != expected:
            raise FaultError(f"{self.behavior} is played by the {expected}, not the {self.role}")
        if self.at < 0:
            raise FaultError("activation time must be non-negative")
        if self.behavior == "FabricateEvent" and self.params.get("kind") not in ("Rebuffering", "ResolutionChange"):
            raise FaultError("FabricateEvent needs params.kind Rebuffering or ResolutionChange")

    def to_obj(self) -> dict:
        obj = {"role": self.role, "behavior": self.behavior, "at": self.at, "params": self.params}
        if self.session is not None:
            obj["session"] = self.session
        return obj

    @classmethod
    def from_obj(cls, obj: dict) -> "FaultScript":
        return cls(obj["role"], obj["behavior"], float(obj["at"]), dict(obj.get("params", {})), obj.get("session"))


def load_faults(path: str | Path) -> list[FaultScript]:
    out = []
    for lineno, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        try:
            out.append(FaultScript.from_obj(json.loads(line)))
        except (ValueError, KeyError, TypeError) as exc:
            raise FaultError(f"line {lineno}: {exc}") from exc
    return out


def write_faults(faults: Iterable[FaultScript], path: str | Path) -> None:
    Path(path).write_text("".join(json.dumps(f.to_obj()) + "\n" for f in faults))


def faults_for(faults: Iterable[FaultScript], session_id: str) -> list[FaultScript]:
    return [f for f in faults if f.session in (None, session_id)]


# -- planning --------------------------------------------------------------------


class ExpectedPlayback:
    """Where an honest client's playhead is expected to be, from the trace alone."""

    def __init__(self, session: TraceSession):
        self.session = session
        first = session.chunks[0].t_send + session.latency.down_base
        self.t0 = max(first, session.startup) + INSERTION_DELAY
        self.stalls = sorted(session.rebuffers)
        self.end_pts = session.chunks[-1].end_pts

    def time_at(self, pts: float) -> float:
        shift = sum(d for q, d in self.stalls if q < pts)
        return self.t0 + pts + shift

    def playhead(self, t: float) -> float:
        if t <= self.t0:
            return 0.0
        shift = 0.0
        for q, d in self.stalls:
            dry = self.t0 + q + shift
            if t < dry:
                break
            if t < dry + d:
                return q
            shift += d
        return min(t - self.t0 - shift, self.end_pts)

    def report_times(self) -> list[float]:
        """Times at which an honest client reports stall ends and resolution changes."""
        s = self.session
        down = s.latency.down_base
        times = []
        for prev, cur in zip(s.chunks, s.chunks[1:]):
            if prev.resolution != cur.resolution:
                times.append(max(cur.t_send + down, s.startup))
        stall_pts = {q for q, _ in self.stalls}
        for c in s.chunks:
            if c.pts in stall_pts:
                times.append(c.t_send + down + INSERTION_DELAY)
        return sorted(times)


def plan_fault(
    session: TraceSession,
    behavior: str,
    window_s: float,
    *,
    variant: int = 0,
    lead: float = 10.0,
    margin: float = 8.0,
) -> FaultScript | None:
    """A fault whose effect should land inside the window it activates in.

    Activation is placed ``lead`` seconds into a window; server-side faults
    additionally need an honest event to act on before the window's half-way
    point minus ``margin``.  Returns ``None`` when the session offers no such
    opportunity.
    """
    play = ExpectedPlayback(session)
    role = BEHAVIOR_ROLES[behavior]
    n_windows = int(play.end_pts // window_s) + 1
    stall_pts = {q for q, _ in play.stalls}
    length = session.chunks[0].length
    for k in range(n_windows):
        ws = k * window_s
        latest = ws + window_s / 2 - margin
        if ws + lead + 2 * length > min(latest, play.end_pts - 2 * length):
            continue
        at = play.time_at(ws + lead)
        if behavior in ("DenyEvent", "DropVerdict"):
            upcoming = [t for t in play.report_times() if at <= t and play.playhead(t) < latest]
            if not upcoming:
                continue
            return FaultScript(role, behavior, round(at, 6), {}, session.session_id)
        if behavior == "FabricateEvent":
            # a boundary that has already been played and was not a real stall
            p = next(
                (c.pts for c in reversed(session.chunks) if 0 < c.pts <= ws + lead - length and c.pts not in stall_pts),
                None,
            )
            if p is None:
                continue
            if variant % 2 == 0:
                params = {"kind": "Rebuffering", "pts": p, "duration": 2.0}
            else:
                actual = next(c.resolution for c in session.chunks if c.pts == p)
                labels = sorted({c.resolution for c in session.chunks} | {"240p", "1080p"})
                wrong = next(label for label in labels if label != actual)
                params = {"kind": "ResolutionChange", "pts": p, "resolution": wrong}
            return FaultScript(role, behavior, round(at, 6), params, session.session_id)
        if behavior == "OneSidedReset":
            return FaultScript(role, behavior, round(at, 6), {}, session.session_id)
        if behavior == "DelayAcks":
            return FaultScript(role, behavior, round(at, 6), {"extra": DEFAULT_EXTRA_ACK_DELAY}, session.session_id)
    return None


# -- injection -------------------------------------------------------------------


def apply_client_fault(monitor, fault: FaultScript) -> float | None:
    """Make ``monitor`` misbehave as scripted.

    Returns the extra ack delay to apply from now on for DelayAcks, else None.
    """
    if fault.role != "client" or not monitor.engaged:
        return None
    if fault.behavior == "FabricateEvent":
        p = fault.params
        if p["kind"] == "Rebuffering":
            body = {"event": "Rebuffering", "pts": p["pts"], "duration": p.get("duration")}
        else:
            body = {"event": "ResolutionChange", "pts": p["pts"], "resolution": p["resolution"]}
        monitor.report(EventOfInterest.from_body(body))
    elif fault.behavior == "OneSidedReset":
        monitor.outbox.append(("RESET", {"origin": "client", "mode": "out-of-order", "pts": monitor.player.playhead_pts}))
    elif fault.behavior == "DelayAcks":
        return float(fault.params.get("extra", DEFAULT_EXTRA_ACK_DELAY))
    return None


class VerdictTamper:
    """Server-side faults: rewrite or swallow the first final verdict after activation."""

    def __init__(self, scripts: Iterable[FaultScript]):
        self.scripts = sorted((f for f in scripts if f.role == "server"), key=lambda f: f.at)
        self.spent: set[int] = set()
        self.dropped_query: int | None = None
        self.log: list[dict] = []

    def apply(self, body: dict, elapsed: float | None) -> dict | None:
        if self.dropped_query is not None and body["query_id"] == self.dropped_query:
            return None
        if elapsed is None or body["verdict"] == "Deferred":
            return body
        for i, f in enumerate(self.scripts):
            if i in self.spent or elapsed < f.at:
                continue
            self.spent.add(i)
            self.log.append({"behavior": f.behavior, "t": elapsed, "query_id": body["query_id"]})
            if f.behavior == "DenyEvent":
                return {**body, "verdict": "Dispute", "evidence": {"reason": "denied"}}
            if f.behavior == "DropVerdict":
                self.dropped_query = body["query_id"]
                return None
        return body
