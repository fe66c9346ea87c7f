"""Streaming contracts: parsing, leveled evaluation and window bookkeeping.

A contract document is a JSON object with three keys::

    {"window": 120,
     "resolution": [[["720p", 0.5], ["1080p", 1], ["4K", 1]],
                    [["720p", 0.7], ["1080p", 1], ["4K", 1]]],
     "rebuffering": [1, 5]}

Each inner list is a *level*; index 0 is the strictest.  A window is judged
at its current level and moves to the next level for the remainder of the
window as soon as a cap is provably exceeded.
"""

from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Sequence

from ugovor.errors import UgoVorError

#: Slack used when comparing accumulated seconds against caps.
EPS = 1e-9

#: Window indices of successive reset epochs are offset by this stride so that
#: every party derives the same fresh index without coordination.
EPOCH_STRIDE = 1_000_000


class MalformedDocument(UgoVorError):
    """The contract text is not a well-formed JSON document."""


class InvalidContract(UgoVorError):
    """The document parsed but violates a contract invariant."""

    def __init__(self, invariant: str, message: str):
        super().__init__(f"{invariant}: {message}")
        self.invariant = invariant


class WindowOverflow(UgoVorError):
    """More playback was recorded than fits in the contract window."""


class ContractOutcome(enum.Enum):
    SATISFIED = "Satisfied"
    VIOLATED = "ViolatedAtLevel"
    EXHAUSTED = "Exhausted"


@dataclass(frozen=True)
class Level:
    caps: tuple[tuple[str, float], ...]

    def cap(self, label: str) -> float | None:
        for name, fraction in self.caps:
            if name == label:
                return fraction
        return None

    @property
    def labels(self) -> tuple[str, ...]:
        return tuple(name for name, _ in self.caps)


@dataclass(frozen=True)
class Contract:
    window_s: float
    levels: tuple[Level, ...]
    rebuffering_caps: tuple[int, ...]

    @property
    def n_levels(self) -> int:
        return len(self.levels)

    def to_dict(self) -> dict:
        window = int(self.window_s) if float(self.window_s).is_integer() else self.window_s
        return {
            "window": window,
            "resolution": [[[name, frac] for name, frac in level.caps] for level in self.levels],
            "rebuffering": list(self.rebuffering_caps),
        }

    def to_text(self) -> str:
        """Canonical compact text; ``parse_contract(c.to_text()) == c``."""
        return json.dumps(self.to_dict(), separators=(",", ":"))


def parse_contract(text: str | bytes) -> Contract:
    try:
        doc = json.loads(text)
    except (ValueError, TypeError) as exc:
        raise MalformedDocument(str(exc)) from exc
    return contract_from_dict(doc)


def _is_number(value) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def contract_from_dict(doc) -> Contract:
    if not isinstance(doc, dict):
        raise InvalidContract("document", "top level must be an object")
    expected = {"window", "resolution", "rebuffering"}
    if set(doc) != expected:
        missing = sorted(expected - set(doc))
        extra = sorted(set(doc) - expected)
        raise InvalidContract("keys", f"missing={missing} unexpected={extra}")

    window = doc["window"]
    if not _is_number(window) or not math.isfinite(window) or window <= 0:
        raise InvalidContract("window_positive", f"window must be a positive number, got {window!r}")

    raw_levels = doc["resolution"]
    if not isinstance(raw_levels, list) or not raw_levels:
        raise InvalidContract("levels_nonempty", "resolution must be a non-empty list of levels")
    levels = []
    for i, raw in enumerate(raw_levels):
        if not isinstance(raw, list) or not raw:
            raise InvalidContract("level_shape", f"level {i} must be a non-empty list of pairs")
        caps = []
        for pair in raw:
            if (
                not isinstance(pair, list)
                or len(pair) != 2
                or not isinstance(pair[0], str)
                or not _is_number(pair[1])
            ):
                raise InvalidContract("level_shape", f"level {i} has a malformed pair {pair!r}")
            label, fraction = pair
            if not 0.0 <= fraction <= 1.0:
                raise InvalidContract("cap_range", f"level {i}: cap for {label} is {fraction}, outside [0, 1]")
            caps.append((label, fraction))
        labels = [name for name, _ in caps]
        if len(set(labels)) != len(labels):
            raise InvalidContract("labels_distinct", f"level {i} repeats a resolution label")
        if not any(frac == 1 for _, frac in caps):
            raise InvalidContract("level_satisfiable", f"level {i} has no resolution with cap 1")
        levels.append(Level(tuple(caps)))

    rebuf = doc["rebuffering"]
    if not isinstance(rebuf, list) or any(
        not isinstance(x, int) or isinstance(x, bool) or x < 0 for x in rebuf
    ):
        raise InvalidContract("rebuffering_shape", "rebuffering must be a list of non-negative integers")
    if len(rebuf) != len(levels):
        raise InvalidContract(
            "rebuffering_length", f"{len(rebuf)} rebuffering caps for {len(levels)} levels"
        )
    if any(b < a for a, b in zip(rebuf, rebuf[1:])):
        raise InvalidContract("rebuffering_monotone", "rebuffering caps must be non-decreasing")

    return Contract(float(window), tuple(levels), tuple(rebuf))


@dataclass(frozen=True)
class SessionLedger:
    """Per-window accounting at the current contract level.

    ``exhausted`` is set once the last level has been violated; the window
    keeps accumulating statistics but is no longer checked.
    """

    window_index: int = 0
    level_index: int = 0
    played_s: Mapping[str, float] = field(default_factory=dict)
    rebuffer_count: int = 0
    window_start_pts: float = 0.0
    exhausted: bool = False

    @property
    def total_played(self) -> float:
        return sum(self.played_s.values())

    def snapshot(self) -> dict:
        return {
            "window": self.window_index,
            "start_pts": self.window_start_pts,
            "level": self.level_index,
            "exhausted": self.exhausted,
            "rebuffer_count": self.rebuffer_count,
            "played_s": {k: v for k, v in sorted(self.played_s.items()) if v > 0},
        }


def record_playback(ledger: SessionLedger, resolution: str, seconds: float, *, window_s: float) -> SessionLedger:
    if seconds < 0:
        raise ValueError("seconds must be non-negative")
    if ledger.total_played + seconds > window_s + EPS:
        raise WindowOverflow(
            f"window {ledger.window_index}: {ledger.total_played} + {seconds} s exceeds {window_s} s"
        )
    played = dict(ledger.played_s)
    played[resolution] = played.get(resolution, 0.0) + seconds
    return replace(ledger, played_s=played)


def record_rebuffering(ledger: SessionLedger) -> SessionLedger:
    return replace(ledger, rebuffer_count=ledger.rebuffer_count + 1)


def level_violations(contract: Contract, ledger: SessionLedger, level_index: int | None = None) -> list[str]:
    """Reasons the ledger breaks the given level (empty when it complies)."""
    idx = ledger.level_index if level_index is None else level_index
    level = contract.levels[idx]
    reasons = []
    for label, seconds in sorted(ledger.played_s.items()):
        if seconds <= EPS:
            continue
        cap = level.cap(label)
        if cap is None:
            reasons.append(f"{label} not permitted at level {idx}")
        elif seconds > cap * contract.window_s + EPS:
            reasons.append(f"{label} played {seconds:g}s > {cap:g} of {contract.window_s:g}s")
    if ledger.rebuffer_count > contract.rebuffering_caps[idx]:
        reasons.append(f"{ledger.rebuffer_count} rebufferings > cap {contract.rebuffering_caps[idx]}")
    return reasons


def check_level(contract: Contract, ledger: SessionLedger) -> ContractOutcome:
    if ledger.exhausted:
        return ContractOutcome.EXHAUSTED
    if ledger.level_index >= contract.n_levels:
        raise ValueError(f"level {ledger.level_index} out of range for {contract.n_levels} levels")
    if level_violations(contract, ledger):
        return ContractOutcome.VIOLATED
    return ContractOutcome.SATISFIED


def downgrade(ledger: SessionLedger, contract: Contract) -> SessionLedger:
    """Move to the next level, keeping the window's statistics.

    On the last level the ledger is marked exhausted instead.
    """
    if ledger.exhausted:
        return ledger
    if ledger.level_index + 1 >= contract.n_levels:
        return replace(ledger, exhausted=True)
    return replace(ledger, level_index=ledger.level_index + 1)


def settle(contract: Contract, ledger: SessionLedger) -> tuple[SessionLedger, list[int]]:
    """Apply check/downgrade until the ledger is satisfied or exhausted.

    Returns the final ledger and the list of levels that were violated on
    the way, in order.
    """
    violated = []
    while check_level(contract, ledger) is ContractOutcome.VIOLATED:
        violated.append(ledger.level_index)
        ledger = downgrade(ledger, contract)
    return ledger, violated


def roll_window(
    ledger: SessionLedger,
    contract: Contract,
    new_start_pts: float,
    *,
    commanded: bool = False,
    new_index: int | None = None,
) -> SessionLedger:
    if not commanded and new_start_pts + EPS < ledger.window_start_pts + contract.window_s:
        raise ValueError(
            f"window starting at {ledger.window_start_pts} has not expired at {new_start_pts}"
        )
    index = ledger.window_index + 1 if new_index is None else new_index
    return SessionLedger(window_index=index, window_start_pts=new_start_pts)


@dataclass(frozen=True)
class WindowFrame:
    """Maps presentation timestamps to contract windows.

    Windows are consecutive and half-open, anchored at ``anchor_pts``.  Each
    agreed reset starts a new epoch anchored at the reset position.
    """

    window_s: float
    anchor_pts: float = 0.0
    epoch: int = 0

    def index_of(self, pts: float) -> int:
        k = math.floor((pts - self.anchor_pts) / self.window_s + EPS)
        return self.epoch * EPOCH_STRIDE + max(k, 0)

    def start_of(self, index: int) -> float:
        return self.anchor_pts + (index - self.epoch * EPOCH_STRIDE) * self.window_s

    def end_of(self, index: int) -> float:
        return self.start_of(index) + self.window_s

    def restarted(self, anchor_pts: float) -> "WindowFrame":
        return WindowFrame(self.window_s, anchor_pts, self.epoch + 1)


def resolution_in_effect(changes: Sequence[tuple[float, str]], pts: float) -> str | None:
    current = None
    for p, label in changes:
        if p <= pts + EPS:
            current = label
        else:
            break
    return current


def played_between(changes: Sequence[tuple[float, str]], start: float, end: float) -> dict[str, float]:
    """Seconds spent at each resolution over ``[start, end)``.

    ``changes`` is a pts-sorted timeline of ``(pts, label)`` entries; the
    label of the last entry at or before ``start`` is in effect at ``start``.
    """
    played: dict[str, float] = {}
    if end <= start:
        return played
    label = resolution_in_effect(changes, start)
    cursor = start
    for p, new_label in changes:
        if p <= start + EPS:
            continue
        if p >= end - EPS:
            break
        if label is not None:
            played[label] = played.get(label, 0.0) + (p - cursor)
        cursor, label = p, new_label
    if label is not None:
        played[label] = played.get(label, 0.0) + (end - cursor)
    return played


def change_list(chunks: Iterable[tuple[float, float, str]], start: float, end: float) -> list[tuple[float, str]]:
    """Resolution changes of a window up to ``end`` (exclusive).

    ``chunks`` yields ``(pts, length_s, resolution)`` in playback order.  The
    first entry is the resolution in effect at ``start``; later entries are
    the chunk boundaries in ``(start, end)`` where the resolution changed.
    """
    out: list[tuple[float, str]] = []
    prev = None
    for pts, length, res in chunks:
        if pts + length <= start + EPS:
            prev = res
            continue
        if pts >= end - EPS:
            break
        if not out:
            out.append((start, res))
        elif res != prev:
            out.append((pts, res))
        prev = res
    return out
