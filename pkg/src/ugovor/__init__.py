"""Multilateral micro-monitoring of streaming contracts.

The package is split along the three protocol roles (client monitor,
server monitor, auditor), the pure contract/virtual-buffer logic they
share, the wire format, a trace-driven emulation harness and an
analytics toolkit.
"""

from ugovor.contract import (
    Contract,
    ContractOutcome,
    Level,
    SessionLedger,
    check_level,
    downgrade,
    parse_contract,
    record_playback,
    roll_window,
)
from ugovor.events import EventKind, EventOfInterest
from ugovor.virtual_buffer import (
    ChunkMap,
    ChunkRecord,
    VirtualBuffer,
    must_confirm_rebuffering,
    rebuffering_upper_bound,
)

__all__ = [
    "ChunkMap",
    "ChunkRecord",
    "Contract",
    "ContractOutcome",
    "EventKind",
    "EventOfInterest",
    "Level",
    "SessionLedger",
    "VirtualBuffer",
    "check_level",
    "downgrade",
    "must_confirm_rebuffering",
    "parse_contract",
    "rebuffering_upper_bound",
    "record_playback",
    "roll_window",
]

__version__ = "0.1.0"
