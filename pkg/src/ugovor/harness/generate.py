"""Seeded synthetic trace corpus.

The generator stands in for a recorded production dataset.  Its defaults
reproduce the aggregate shapes that matter to the protocol: 2 s chunks,
HD-dominated resolution mix, a median of about five resolution switches per
minute (with a small share of sessions switching on every chunk), a median
session length of about 155 s, and 12.5% of sessions with stalls that are
mostly longer than a second.

Sends are paced so the client's buffer hovers around ``buffer_target``
seconds; a scripted stall is produced by withholding the chunk that starts
at the stall position until the buffer has been dry for the stall duration.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ugovor.errors import UgoVorError
from ugovor.harness.trace import LatencyProfile, TraceChunk, TraceSession

#: matches the client monitor's insertion delay
INSERTION_DELAY = 0.010


class InvalidParameters(UgoVorError):
    pass


DEFAULT_LADDER = (
    ("240p", 0.3e6),
    ("360p", 0.6e6),
    ("480p", 1.2e6),
    ("720p", 2.5e6),
    ("1080p", 4.5e6),
)


@dataclass
class CorpusParams:
    n_sessions: int = 384
    chunk_length: float = 2.0
    ladder: tuple[tuple[str, float], ...] = DEFAULT_LADDER
    weights: tuple[float, ...] = (0.03, 0.03, 0.07, 0.42, 0.45)
    #: median per-chunk switch probability (1/6 is five switches a minute)
    switch_prob_median: float = 1 / 6
    switch_prob_sigma: float = 0.6
    always_switch_fraction: float = 0.05
    rebuffer_fraction: float = 0.125
    single_stall_share: float = 0.4
    max_stalls: int = 5
    stall_median: float = 12.0
    stall_sigma: float = 1.51
    stall_min: float = 0.5
    stall_max: float = 30.0
    duration_median: float = 155.0
    duration_sigma: float = 0.7
    duration_min: float = 40.0
    duration_max: float = 600.0
    buffer_target: float = 10.0
    startup_chunks: int = 3
    #: playback starts this long after the request, whatever has arrived
    startup_delay: float = 4.0
    bandwidth_bps: float = 50e6
    latency_min: float = 0.001
    latency_max: float = 0.300
    jitter_fraction: float = 0.1
    groups: int = 10
    arrival_spacing: float = 30.0
    health_interval: float = 10.0

    def validate(self) -> None:
        if self.n_sessions < 0:
            raise InvalidParameters("n_sessions must be non-negative")
        if self.chunk_length <= 0:
            raise InvalidParameters("chunk_length must be positive")
        if len(self.ladder) != len(self.weights) or not self.ladder:
            raise InvalidParameters("ladder and weights must be non-empty and the same length")
        if any(w < 0 for w in self.weights) or sum(self.weights) <= 0:
            raise InvalidParameters("weights must be non-negative with a positive sum")
        if not 0.0 <= self.rebuffer_fraction <= 1.0:
            raise InvalidParameters("rebuffer_fraction must lie in [0, 1]")
        if not 0.0 <= self.always_switch_fraction <= 1.0:
            raise InvalidParameters("always_switch_fraction must lie in [0, 1]")
        if not 0 < self.latency_min <= self.latency_max:
            raise InvalidParameters("latency bounds must satisfy 0 < min <= max")
        if not 0 < self.stall_min <= self.stall_max:
            raise InvalidParameters("stall bounds must satisfy 0 < min <= max")
        if not 0 < self.duration_min <= self.duration_max:
            raise InvalidParameters("duration bounds must satisfy 0 < min <= max")
        if self.duration_min < 16 * self.chunk_length:
            raise InvalidParameters("sessions must be at least 16 chunks long to host a stall")
        if self.buffer_target < 2 * self.chunk_length:
            raise InvalidParameters("buffer_target must cover at least two chunks")
        if self.startup_delay < 0:
            raise InvalidParameters("startup_delay must be non-negative")
        if self.max_stalls < 1:
            raise InvalidParameters("max_stalls must be at least 1")


@dataclass
class _Plan:
    n_chunks: int
    resolutions: list[str] = field(default_factory=list)
    stalls: dict[int, float] = field(default_factory=dict)  # chunk index -> duration


def generate_synthetic(params: CorpusParams | None = None, seed: int = 1) -> list[TraceSession]:
    params = params or CorpusParams()
    params.validate()
    rng = np.random.default_rng(seed)
    n = params.n_sessions
    n_stalled = int(round(params.rebuffer_fraction * n))
    stalled = set(rng.choice(n, size=n_stalled, replace=False).tolist()) if n_stalled else set()
    sessions = []
    for i in range(n):
        plan = _plan_session(params, rng, i in stalled)
        latency = _latency(params, rng)
        group = f"AS{int(rng.integers(params.groups)) + 1}"
        sessions.append(_materialize(params, f"s{i:05d}", plan, latency, group, start_time=i * params.arrival_spacing))
    return sessions


def _plan_session(params: CorpusParams, rng: np.random.Generator, with_stalls: bool) -> _Plan:
    duration = float(np.clip(rng.lognormal(math.log(params.duration_median), params.duration_sigma),
                             params.duration_min, params.duration_max))
    n_chunks = max(int(round(duration / params.chunk_length)), 16)
    labels = [label for label, _ in params.ladder]
    weights = np.asarray(params.weights, dtype=float)
    weights = weights / weights.sum()
    if len(labels) > 1 and rng.random() < params.always_switch_fraction:
        p_switch = 1.0
    else:
        p_switch = float(np.clip(rng.lognormal(math.log(params.switch_prob_median), params.switch_prob_sigma), 0, 0.9))
    current = int(rng.choice(len(labels), p=weights))
    resolutions = [labels[current]]
    for _ in range(n_chunks - 1):
        if len(labels) > 1 and rng.random() < p_switch:
            others = weights.copy()
            others[current] = 0.0
            if others.sum() > 0:
                current = int(rng.choice(len(labels), p=others / others.sum()))
        resolutions.append(labels[current])
    plan = _Plan(n_chunks, resolutions)
    if with_stalls:
        if rng.random() < params.single_stall_share:
            k = 1
        else:
            k = int(rng.integers(2, params.max_stalls + 1))
        # stalls sit before chunk indices in [10, n-3), at least 3 chunks apart
        candidates = list(range(10, n_chunks - 3))
        chosen: list[int] = []
        for idx in rng.permutation(candidates).tolist():
            if all(abs(idx - c) >= 3 for c in chosen):
                chosen.append(idx)
            if len(chosen) == k:
                break
        for idx in sorted(chosen):
            d = float(np.clip(rng.lognormal(math.log(params.stall_median), params.stall_sigma),
                              params.stall_min, params.stall_max))
            plan.stalls[idx] = round(d, 3)
    return plan


def _latency(params: CorpusParams, rng: np.random.Generator) -> LatencyProfile:
    down, up = (float(x) for x in rng.uniform(params.latency_min, params.latency_max, size=2))
    return LatencyProfile(
        round(down, 4), round(down * params.jitter_fraction, 4), round(up, 4), round(up * params.jitter_fraction, 4)
    )


def _materialize(
    params: CorpusParams, sid: str, plan: _Plan, latency: LatencyProfile, group: str, start_time: float
) -> TraceSession:
    bitrate = dict(params.ladder)
    length = params.chunk_length
    down, up = latency.down_base, latency.up_base
    # playback of the first chunk begins at the startup instant
    startup = max(params.startup_delay, down)
    t0 = startup + INSERTION_DELAY
    chunks: list[TraceChunk] = []
    rebuffers: list[tuple[float, float]] = []
    stalled_before = 0.0  # total stall time before the current pts
    t_prev = 0.0
    for i, res in enumerate(plan.resolutions):
        pts = i * length
        size = int(round(bitrate[res] * length / 8))
        transfer = size * 8 / params.bandwidth_bps
        if i in plan.stalls:
            # client runs dry at pts; the chunk lands after the scripted stall
            dry_at = t0 + pts + stalled_before
            d = plan.stalls[i]
            t_send = max(dry_at + d - down - INSERTION_DELAY, t_prev)
            rebuffers.append((pts, d))
            stalled_before += d
        elif i < params.startup_chunks:
            t_send = t_prev + (transfer if i else 0.0)
        else:
            target = t0 + pts + stalled_before - params.buffer_target
            t_send = max(target, t_prev + transfer)
        t_send = round(t_send, 6)
        t_ack = round(t_send + down + up + transfer, 6)
        if chunks:
            t_ack = max(t_ack, chunks[-1].t_ack)
        chunks.append(TraceChunk(i, t_send, t_ack, size, res, float(pts), length))
        t_prev = t_send
    health = _health(params, chunks, rebuffers, t0, down)
    return TraceSession(sid, chunks, rebuffers, health, latency, group, start_time, round(startup, 6))


def _health(params, chunks, rebuffers, t0, down) -> list[tuple[float, float]]:
    """Buffer level samples implied by the schedule (for plotting)."""
    stalls, shift = [], 0.0
    for pts, d in rebuffers:
        stalls.append((t0 + pts + shift, d))
        shift += d
    end_t = chunks[-1].t_send + 2 * params.buffer_target
    out = []
    t = params.health_interval
    while t < end_t:
        played = max(t - t0, 0.0) - sum(min(d, max(t - s, 0.0)) for s, d in stalls)
        received = sum(c.length for c in chunks if c.t_send + down <= t)
        out.append((round(t, 3), round(max(received - played, 0.0), 3)))
        t += params.health_interval
    return out
