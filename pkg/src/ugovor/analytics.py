"""Aggregate statistics over trace corpora and replay reports.

Inputs are either :class:`~ugovor.harness.trace.TraceSession` objects or
replay report records (dicts as written by ``write_reports``).  Outputs are
plain columnar structures so they can be dumped as JSON lines or CSV and
plotted elsewhere.
"""

from __future__ import annotations

import math
import re
import statistics
from collections import defaultdict
from dataclasses import dataclass, field
from typing import Any, Iterable, Mapping, Sequence

from ugovor.contract import (
    EPS,
    Contract,
    SessionLedger,
    contract_from_dict,
    record_playback,
    record_rebuffering,
    settle,
)
from ugovor.errors import UgoVorError
from ugovor.harness.faults import ExpectedPlayback
from ugovor.harness.trace import TraceSession

BOX_QUANTILES = (5, 25, 50, 75, 95)
METRICS = ("switches_per_minute", "session_duration", "rebuffers_per_session", "rebuffer_duration")


class EmptyCorpus(UgoVorError):
    pass


class InvalidParameters(UgoVorError):
    pass


# -- per-session facts ------------------------------------------------------------------


@dataclass
class SessionStats:
    session: str
    group: str
    duration: float
    switches: int
    rebuffer_durations: list[float] = field(default_factory=list)

    @property
    def switches_per_minute(self) -> float:
        return self.switches / (self.duration / 60.0) if self.duration > 0 else 0.0


def session_stats(item: TraceSession | Mapping[str, Any]) -> SessionStats:
    if isinstance(item, TraceSession):
        return SessionStats(
            item.session_id,
            item.group,
            item.duration,
            item.resolution_switches(),
            [d for _, d in item.rebuffers],
        )
    # a replay report: count what the auditor logged
    events = item.get("events", [])
    return SessionStats(
        item["session"],
        item.get("group", ""),
        float(item["duration"]),
        sum(1 for e in events if e["event"] == "ResolutionChange"),
        [e["duration"] for e in events if e["event"] == "Rebuffering" and e.get("duration") is not None],
    )


def _as_records(items: Iterable) -> list:
    out = []
    for it in items:
        if isinstance(it, (TraceSession, Mapping)):
            out.append(it)
        elif hasattr(it, "to_record"):
            out.append(it.to_record())
        else:
            raise TypeError(f"cannot analyse {type(it).__name__}")
    return out


# -- distributions -------------------------------------------------------------------------


@dataclass
class CdfTable:
    metric: str
    values: list[float]
    fractions: list[float]

    def at(self, value: float) -> float:
        """Cumulative fraction of samples <= value."""
        frac = 0.0
        for v, f in zip(self.values, self.fractions):
            if v <= value + EPS:
                frac = f
        return frac

    def to_rows(self) -> list[dict]:
        return [{"metric": self.metric, "value": v, "cdf": f} for v, f in zip(self.values, self.fractions)]


def empirical_cdf(metric: str, samples: Sequence[float]) -> CdfTable:
    """Step CDF: one row per distinct value with the fraction of samples at or below it."""
    n = len(samples)
    values, fractions = [], []
    if n:
        ordered = sorted(samples)
        for i, v in enumerate(ordered):
            if i + 1 < n and ordered[i + 1] == v:
                continue
            values.append(v)
            fractions.append((i + 1) / n)
    return CdfTable(metric, values, fractions)


def nearest_rank(samples: Sequence[float], q: float) -> float:
    """Nearest-rank percentile ``q`` in [0, 100]."""
    if not samples:
        raise EmptyCorpus("no samples")
    if not 0 <= q <= 100:
        raise ValueError("percentile must lie in [0, 100]")
    ordered = sorted(samples)
    rank = max(math.ceil(q / 100 * len(ordered)), 1)
    return ordered[rank - 1]


def box_quantiles(samples: Sequence[float], quantiles: Sequence[float] = BOX_QUANTILES) -> dict[str, float]:
    return {f"p{q:g}": nearest_rank(samples, q) for q in quantiles}


def _metric_samples(stats: list[SessionStats]) -> dict[str, list[float]]:
    return {
        "switches_per_minute": [s.switches_per_minute for s in stats],
        "session_duration": [s.duration for s in stats],
        "rebuffers_per_session": [float(len(s.rebuffer_durations)) for s in stats],
        "rebuffer_duration": [d for s in stats for d in s.rebuffer_durations],
    }


@dataclass
class DistributionReport:
    sessions: int
    stalled_fraction: float
    cdfs: dict[str, CdfTable]
    groups: dict[str, dict[str, dict[str, float]]] = field(default_factory=dict)

    def to_rows(self) -> list[dict]:
        rows = [r for m in METRICS for r in self.cdfs[m].to_rows()]
        for group, metrics in sorted(self.groups.items()):
            for metric, qs in metrics.items():
                rows.append({"group": group, "metric": metric, **qs})
        return rows


def distribution_report(corpus: Iterable, *, grouped: bool = False) -> DistributionReport:
    """CDFs of switch rate, duration, stall count and stall duration.

    With ``grouped=True`` each group additionally gets box-plot quantiles
    for every metric that has samples in that group.
    """
    stats = [session_stats(x) for x in _as_records(corpus)]
    if not stats:
        raise EmptyCorpus("distribution_report needs at least one session")
    samples = _metric_samples(stats)
    cdfs = {m: empirical_cdf(m, samples[m]) for m in METRICS}
    stalled = sum(1 for s in stats if s.rebuffer_durations) / len(stats)
    groups: dict[str, dict[str, dict[str, float]]] = {}
    if grouped:
        by_group: dict[str, list[SessionStats]] = defaultdict(list)
        for s in stats:
            by_group[s.group].append(s)
        for g, members in sorted(by_group.items()):
            gs = _metric_samples(members)
            groups[g] = {m: box_quantiles(v) for m, v in gs.items() if v}
    return DistributionReport(len(stats), stalled, cdfs, groups)


_HEIGHT = re.compile(r"^(\d+)p$")
_NAMED = {"SD": 480, "HD": 720, "FHD": 1080, "2K": 1440, "4K": 2160, "8K": 4320}


def resolution_height(label: str) -> float | None:
    """Vertical resolution for labels like ``720p`` or ``4K``; None if unknown."""
    m = _HEIGHT.match(label)
    if m:
        return float(m.group(1))
    return _NAMED.get(label.upper())


def quality_timeline(corpus: Iterable[TraceSession], bucket_s: float = 60.0) -> list[dict]:
    """Mean resolution height over the sessions playing in each time bucket.

    Sessions are placed on a shared timeline by their ``start_time``; the
    value for a bucket is sampled at its midpoint.
    """
    if bucket_s <= 0:
        raise ValueError("bucket_s must be positive")
    sessions = list(corpus)
    if not sessions:
        raise EmptyCorpus("quality_timeline needs at least one session")
    spans = []
    for s in sessions:
        exp = ExpectedPlayback(s)
        pieces = []
        for c in s.chunks:
            h = resolution_height(c.resolution)
            if h is None:
                continue
            t = s.start_time + exp.time_at(c.pts)
            pieces.append((t, t + c.length, h))
        spans.append(pieces)
    end = max((p[-1][1] for p in spans if p), default=0.0)
    rows = []
    b = 0
    while b * bucket_s < end:
        mid = (b + 0.5) * bucket_s
        heights = [h for pieces in spans for t0, t1, h in pieces if t0 <= mid < t1]
        rows.append(
            {
                "bucket_start": b * bucket_s,
                "active": len(heights),
                "mean_height": statistics.fmean(heights) if heights else None,
            }
        )
        b += 1
    return rows


# -- contract satisfaction -------------------------------------------------------------------


@dataclass
class WindowTotals:
    window: int
    played_s: dict[str, float]
    rebuffer_count: int
    #: chronological ("play", label, seconds) and ("stall", None, 0.0) steps, when known
    steps: list[tuple[str, str | None, float]] = field(default_factory=list)
    #: outcome recorded by the auditor, for replay reports
    exhausted: bool | None = None


def trace_windows(trace: TraceSession, window_s: float) -> list[WindowTotals]:
    """Per-window playback seconds by resolution and stall count, from pts alone."""
    if not trace.chunks:
        return []
    end = trace.chunks[-1].end_pts
    n = max(math.ceil(end / window_s - EPS), 1)
    out = [WindowTotals(i, {}, 0) for i in range(n)]
    stalls = {pts for pts, _ in trace.rebuffers}
    for c in trace.chunks:
        if c.pts in stalls:
            w = out[min(int((c.pts + EPS) // window_s), n - 1)]
            w.rebuffer_count += 1
            w.steps.append(("stall", None, 0.0))
        start, stop = c.pts, c.end_pts
        while start < stop - EPS:
            w = out[int((start + EPS) // window_s)]
            cut = min(stop, (w.window + 1) * window_s)
            w.played_s[c.resolution] = w.played_s.get(c.resolution, 0.0) + (cut - start)
            w.steps.append(("play", c.resolution, cut - start))
            start = cut
    return out


def report_windows(report: Mapping[str, Any]) -> list[WindowTotals]:
    return [
        WindowTotals(w["window"], dict(w["played_s"] or {}), w["rebuffer_count"], exhausted=w["exhausted"])
        for w in report.get("windows", [])
    ]


def evaluate_window(contract: Contract, totals: WindowTotals) -> SessionLedger:
    """Walk a window through the ledger and return the settled ledger.

    Chronological steps are used when available; otherwise playback totals
    are fed in label order followed by the stalls.
    """
    steps = totals.steps or [("play", k, v) for k, v in sorted(totals.played_s.items())] + [
        ("stall", None, 0.0)
    ] * totals.rebuffer_count
    ledger = SessionLedger(window_index=totals.window)
    for kind, label, seconds in steps:
        if kind == "play":
            ledger = record_playback(ledger, label, seconds, window_s=contract.window_s)
        else:
            ledger = record_rebuffering(ledger)
        ledger, _ = settle(contract, ledger)
    return ledger


def window_exhausted(contract: Contract, totals: WindowTotals) -> bool:
    if totals.exhausted is not None:
        return totals.exhausted
    return evaluate_window(contract, totals).exhausted


def _windows_for(item, window_s: float) -> list[WindowTotals]:
    if isinstance(item, TraceSession):
        return trace_windows(item, window_s)
    return report_windows(item)


def _group_of(item) -> str:
    return item.group if isinstance(item, TraceSession) else item.get("group", "")


def _id_of(item) -> str:
    return item.session_id if isinstance(item, TraceSession) else item["session"]


@dataclass
class SatisfactionReport:
    contract: Contract
    per_group: dict[str, dict[str, float]]
    overall: float
    sessions: dict[str, bool]
    most_restrictive: Contract | None

    def to_rows(self) -> list[dict]:
        return [{"group": g, **v} for g, v in sorted(self.per_group.items())]


def most_restrictive_contract(corpus: Iterable, window_s: float = 120.0) -> Contract:
    """A single level with every observed resolution capped at 1 and the worst stall count."""
    labels: set[str] = set()
    worst = 0
    for item in _as_records(corpus):
        for w in _windows_for(item, window_s):
            labels.update(k for k, v in w.played_s.items() if v > EPS)
            worst = max(worst, w.rebuffer_count)

    def order(label: str):
        h = resolution_height(label)
        return (h is None, h or 0.0, label)

    if not labels:
        raise EmptyCorpus("no playback to synthesize a contract from")
    caps = [[label, 1] for label in sorted(labels, key=order)]
    return contract_from_dict({"window": window_s, "resolution": [caps], "rebuffering": [worst]})


def satisfaction_report(corpus: Iterable, contract: Contract) -> SatisfactionReport:
    """Per group, the share of sessions none of whose windows ends Exhausted.

    Trace sessions are cut into windows of the contract's length and walked
    through the ledger.  Replay reports are judged on the outcomes the
    auditor recorded, so ``contract`` should be the one they ran under.
    """
    items = _as_records(corpus)
    sessions: dict[str, bool] = {}
    groups: dict[str, list[bool]] = defaultdict(list)
    for item in items:
        ok = not any(window_exhausted(contract, w) for w in _windows_for(item, contract.window_s))
        sessions[_id_of(item)] = ok
        groups[_group_of(item)].append(ok)
    per_group = {
        g: {"sessions": len(v), "satisfied": sum(v), "fraction": sum(v) / len(v)} for g, v in sorted(groups.items())
    }
    overall = sum(sessions.values()) / len(sessions) if sessions else 0.0
    try:
        synthesized = most_restrictive_contract(items, contract.window_s)
    except EmptyCorpus:
        synthesized = None
    return SatisfactionReport(contract, per_group, overall, sessions, synthesized)


# -- duration bounds ------------------------------------------------------------------------------


@dataclass
class BoundReport:
    rows: list[dict]
    max_ratio: float | None

    @property
    def all_within(self) -> bool:
        return self.max_ratio is None or self.max_ratio <= 1.0

    def to_rows(self) -> list[dict]:
        return self.rows


def duration_bound_report(reports: Iterable) -> BoundReport:
    """Client duration over server bound for every confirmed stall."""
    rows = []
    for r in _as_records(reports):
        if isinstance(r, TraceSession):
            raise TypeError("duration_bound_report needs replay reports")
        for ev in r.get("confirmed_rebuffers", []):
            rows.append(
                {
                    "session": r["session"],
                    "pts": ev["pts"],
                    "client_duration": ev["client_duration"],
                    "bound": ev["bound"],
                    "ratio": ev["client_duration"] / ev["bound"],
                }
            )
    return BoundReport(rows, max((x["ratio"] for x in rows), default=None))


# -- sample size ---------------------------------------------------------------------------------------


def cochran_sample_size(confidence: float, margin: float, p: float = 0.5, *, rounding: str = "nearest") -> int:
    """Sessions needed to estimate a proportion ``p`` within ``margin``.

    ``rounding="nearest"`` reproduces the customary 384 for (0.95, 0.05, 0.5);
    ``"ceil"`` is the strictly conservative variant and gives 385 there.
    """
    if not 0 < confidence < 1:
        raise InvalidParameters("confidence must lie in (0, 1)")
    if not 0 < margin <= 1:
        raise InvalidParameters("margin must lie in (0, 1]")
    if not 0 <= p <= 1:
        raise InvalidParameters("p must lie in [0, 1]")
    if rounding not in ("nearest", "ceil"):
        raise InvalidParameters("rounding must be 'nearest' or 'ceil'")
    z = statistics.NormalDist().inv_cdf(1 - (1 - confidence) / 2)
    n = z * z * p * (1 - p) / (margin * margin)
    if rounding == "ceil":
        # guard against 138.0000000001 style float noise
        return math.ceil(n - 1e-9)
    return math.floor(n + 0.5)


# -- pricing ----------------------------------------------------------------------------------------------


def price_session(report: Mapping[str, Any], schedule: Sequence[float], exhausted_price: float = 0.0) -> float:
    """Sum the per-window price of each window's final level.

    Exhausted windows cost ``exhausted_price`` (free by default).  For a
    terminated session only the windows that finished before the
    termination are billed.
    """
    if hasattr(report, "to_record"):
        report = report.to_record()
    windows = sorted(report.get("windows", []), key=lambda w: w["window"])
    term = report.get("termination")
    cutoff = None
    if term is not None:
        cutoff = term.get("window")
        if cutoff is None:
            return 0.0
    total = 0.0
    for w in windows:
        if cutoff is not None and w["window"] >= cutoff:
            break
        if w["exhausted"]:
            total += exhausted_price
        elif w["level"] < len(schedule):
            total += schedule[w["level"]]
        else:
            raise InvalidParameters(f"no price for level {w['level']}")
    return total


__all__ = [
    "BOX_QUANTILES",
    "BoundReport",
    "CdfTable",
    "DistributionReport",
    "EmptyCorpus",
    "InvalidParameters",
    "SatisfactionReport",
    "SessionStats",
    "WindowTotals",
    "box_quantiles",
    "cochran_sample_size",
    "distribution_report",
    "duration_bound_report",
    "empirical_cdf",
    "evaluate_window",
    "window_exhausted",
    "most_restrictive_contract",
    "nearest_rank",
    "price_session",
    "quality_timeline",
    "report_windows",
    "resolution_height",
    "satisfaction_report",
    "session_stats",
    "trace_windows",
]
