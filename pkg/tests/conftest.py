from __future__ import annotations

import pytest

from ugovor.contract import parse_contract
from ugovor.harness.trace import LatencyProfile, TraceChunk, TraceSession

LADDER_TEXT = """
{ "window": 120,
  "resolution": [[["720p", 0.5], ["1080p", 1], ["4K", 1]],
                 [["720p", 0.7], ["1080p", 1], ["4K", 1]],
                 [["720p", 0.9], ["1080p", 1], ["4K", 1]]],
  "rebuffering": [1, 5, 10] }
"""

AVERAGE_TEXT = """
{ "window": 120,
  "resolution": [[["240p", 0.09], ["360p", 0.03], ["480p", 0.08], ["720p", 0.80], ["1080p", 1]]],
  "rebuffering": [0] }
"""


@pytest.fixture(scope="session")
def ladder():
    return parse_contract(LADDER_TEXT)


@pytest.fixture(scope="session")
def average_contract():
    return parse_contract(AVERAGE_TEXT)


def make_trace(
    resolutions,
    *,
    sid="t0",
    stalls=None,
    length=2.0,
    size=250_000,
    latency=LatencyProfile(0.02, 0.0, 0.02, 0.0),
    startup=0.0,
    lead=6.0,
) -> TraceSession:
    """A hand-built trace: chunks sent ``lead`` seconds ahead of playback.

    ``stalls`` maps a chunk index to the stall (seconds) before it plays;
    that chunk is sent late enough for the client to run dry.
    """
    stalls = stalls or {}
    chunks, rebuffers = [], []
    shift = 0.0
    t_prev = 0.0
    for i, res in enumerate(resolutions):
        pts = i * length
        if i in stalls:
            shift += stalls[i]
            rebuffers.append((pts, stalls[i]))
        # playback of chunk i starts at startup + pts + shift (plus small delays)
        t_play = startup + pts + shift
        t_send = max(t_play - lead, t_prev, 0.0)
        if i in stalls:
            t_send = max(t_play - latency.down_base - 0.01, t_prev)
        t_prev = t_send
        chunks.append(TraceChunk(i, round(t_send, 6), round(t_send + 0.05, 6), size, res, pts, length))
    return TraceSession(sid, chunks, rebuffers, [], latency, "AS0", 0.0, startup)


#: acceptance criterion number -> (passed, detail), filled by test_acceptance
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}")
