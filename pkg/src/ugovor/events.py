"""Events of interest detected by the client monitor."""

from __future__ import annotations

import enum
from dataclasses import dataclass


class EventKind(str, enum.Enum):
    REBUFFERING = "Rebuffering"
    RESOLUTION_CHANGE = "ResolutionChange"
    CONTRACT_VIOLATION = "ContractViolation"


# body fields carried for each kind, besides "event"
EVENT_FIELDS = {
    EventKind.REBUFFERING: ("pts", "duration"),
    EventKind.RESOLUTION_CHANGE: ("pts", "resolution"),
    EventKind.CONTRACT_VIOLATION: ("pts", "window", "level", "changes"),
}


@dataclass(frozen=True)
class EventOfInterest:
    """A client-side observation.

    ``duration`` is only meaningful for rebufferings (``None`` while the
    stall is still open); ``resolution`` for resolution changes; ``window``,
    ``level`` and ``changes`` for contract violations.
    """

    kind: EventKind
    pts: float
    duration: float | None = None
    resolution: str | None = None
    window: int | None = None
    level: int | None = None
    changes: tuple[tuple[float, str], ...] | None = None

    def to_body(self) -> dict:
        body: dict = {"event": self.kind.value, "pts": self.pts}
        if self.kind is EventKind.REBUFFERING:
            body["duration"] = self.duration
        elif self.kind is EventKind.RESOLUTION_CHANGE:
            body["resolution"] = self.resolution
        else:
            body["window"] = self.window
            body["level"] = self.level
            body["changes"] = [[p, label] for p, label in (self.changes or ())]
        return body

    @classmethod
    def from_body(cls, body: dict) -> "EventOfInterest":
        kind = EventKind(body["event"])
        if kind is EventKind.REBUFFERING:
            return cls(kind, body["pts"], duration=body["duration"])
        if kind is EventKind.RESOLUTION_CHANGE:
            return cls(kind, body["pts"], resolution=body["resolution"])
        changes = tuple((p, label) for p, label in body["changes"])
        return cls(kind, body["pts"], window=body["window"], level=body["level"], changes=changes)


def rebuffering(pts: float, duration: float | None = None) -> EventOfInterest:
    return EventOfInterest(EventKind.REBUFFERING, pts, duration=duration)


def resolution_change(pts: float, resolution: str) -> EventOfInterest:
    return EventOfInterest(EventKind.RESOLUTION_CHANGE, pts, resolution=resolution)


def contract_violation(pts: float, window: int, level: int, changes) -> EventOfInterest:
    return EventOfInterest(
        EventKind.CONTRACT_VIOLATION, pts, window=window, level=level, changes=tuple(map(tuple, changes))
    )
