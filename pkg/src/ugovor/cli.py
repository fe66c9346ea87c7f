"""Command line entry point: ``ugovor <subcommand> ...``.

Settings resolve as command-line flag, then ``UGOVOR_<NAME>`` environment
variable, then the JSON file given with ``--config``, then the built-in
default.  Usage errors exit with status 2; operational failures exit with
status 1 and a one-line JSON error on stderr.
"""

from __future__ import annotations

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
from pathlib import Path
from typing import Any, Callable, Sequence

from ugovor import analytics, wire
from ugovor.auditor import Auditor, AuditorConfig
from ugovor.contract import Contract, InvalidContract, MalformedDocument, parse_contract
from ugovor.errors import UgoVorError
from ugovor.harness.endpoints import (
    AuditorService,
    ClientEndpoint,
    ClientOptions,
    ServerMonitorService,
    VideoServer,
)
from ugovor.harness.faults import BEHAVIOR_ROLES, load_faults, plan_fault, write_faults
from ugovor.harness.generate import CorpusParams, generate_synthetic
from ugovor.harness.net import Clock, Tally
from ugovor.harness.replay import MODES, ReplayConfig, replay_corpus
from ugovor.harness.trace import LatencyProfile, TraceSession, load_trace, write_trace
from ugovor.server_monitor import ServerConfig, ServerMonitor
from ugovor.virtual_buffer import ChunkMap

log = logging.getLogger("ugovor")

ENV_PREFIX = "UGOVOR_"


class CliError(UgoVorError):
    """An operational failure reported with exit status 1."""


class UsageError(CliError):
    """A setting that no flag, variable or config file supplied; exit status 2."""


# -- settings ----------------------------------------------------------------------


class Settings:
    """Flag > environment > config file > default."""

    def __init__(self, args: argparse.Namespace, environ: dict[str, str] | None = None):
        self.args = args
        self.environ = os.environ if environ is None else environ
        self.file: dict[str, Any] = {}
        if getattr(args, "config", None):
            try:
                self.file = json.loads(Path(args.config).read_text())
            except (OSError, ValueError) as exc:
                raise CliError(f"cannot read config {args.config}: {exc}") from exc
            if not isinstance(self.file, dict):
                raise CliError("config file must hold a JSON object")

    def get(self, name: str, default: Any = None, conv: Callable[[str], Any] = str) -> Any:
        value = getattr(self.args, name, None)
        if value is not None:
            return value
        env = self.environ.get(ENV_PREFIX + name.upper())
        if env is not None:
            try:
                return conv(env)
            except ValueError as exc:
                raise CliError(f"{ENV_PREFIX}{name.upper()}: {exc}") from exc
        if name in self.file:
            return self.file[name]
        key = name.replace("_", "-")
        if key in self.file:
            return self.file[key]
        return default

    def require(self, name: str, conv: Callable[[str], Any] = str) -> Any:
        value = self.get(name, conv=conv)
        if value is None:
            raise UsageError(f"--{name.replace('_', '-')} is required (or set {ENV_PREFIX}{name.upper()})")
        return value


def _flag(env: str) -> bool:
    return env.strip().lower() in ("1", "true", "yes", "on")


# -- I/O helpers -----------------------------------------------------------------------


def _read_contract(path: str) -> Contract:
    try:
        return parse_contract(Path(path).read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read contract {path}: {exc}") from exc


def _write_lines(rows, out: str | None) -> None:
    text = "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)
    if out is None or out == "-":
        sys.stdout.write(text)
    else:
        Path(out).write_text(text)


def _read_records(path: str) -> list:
    """Trace sessions or replay reports, whichever the file holds."""
    try:
        with open(path) as fh:
            first = next((line for line in fh if line.strip()), None)
    except OSError as exc:
        raise CliError(f"cannot read {path}: {exc}") from exc
    if first is None:
        return []
    if "type" in json.loads(first):
        return load_trace(path)
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _latency_override(text: str) -> LatencyProfile:
    """``DOWN_MS[:UP_MS]`` with 10% jitter."""
    parts = text.split(":")
    try:
        down = float(parts[0]) / 1000
        up = float(parts[1]) / 1000 if len(parts) > 1 else down
    except (ValueError, IndexError) as exc:
        raise CliError(f"--latency must be DOWN_MS[:UP_MS], got {text!r}") from exc
    return LatencyProfile(down, down / 10, up, up / 10)


def _select(sessions: list[TraceSession], wanted: str | None) -> list[TraceSession]:
    if wanted is None:
        return sessions
    keep = [s for s in sessions if s.session_id == wanted]
    if not keep:
        raise CliError(f"session {wanted!r} is not in the trace")
    return keep


# -- subcommands -------------------------------------------------------------------------


def cmd_validate_contract(args, st: Settings) -> int:
    try:
        contract = parse_contract(Path(args.file).read_bytes())
    except OSError as exc:
        raise CliError(f"cannot read {args.file}: {exc}") from exc
    except MalformedDocument as exc:
        print(json.dumps({"valid": False, "invariant": "json", "message": str(exc)}))
        return 1
    except InvalidContract as exc:
        print(json.dumps({"valid": False, "invariant": exc.invariant, "message": str(exc)}))
        return 1
    print(json.dumps({"valid": True, "window": contract.window_s, "levels": contract.n_levels}))
    return 0


def cmd_gen_corpus(args, st: Settings) -> int:
    params = CorpusParams(n_sessions=st.get("sessions", 384, int))
    sessions = generate_synthetic(params, seed=st.get("seed", 1, int))
    write_trace(sessions, st.require("out"))
    return 0


def cmd_plan_faults(args, st: Settings) -> int:
    sessions = load_trace(st.require("trace"))
    contract = _read_contract(st.require("contract"))
    scripts = []
    for i, s in enumerate(sessions):
        if args.count is not None and len(scripts) >= args.count:
            break
        f = plan_fault(s, args.behavior, contract.window_s, variant=i)
        if f is not None:
            scripts.append(f)
    write_faults(scripts, st.require("out"))
    return 0


def cmd_replay(args, st: Settings) -> int:
    sessions = _select(load_trace(st.require("trace")), args.session)
    contract = _read_contract(st.require("contract"))
    faults = load_faults(args.faults) if args.faults else []
    latency = st.get("latency")
    if latency is not None:
        profile = _latency_override(latency)
        for s in sessions:
            s.latency = profile
    config = ReplayConfig(
        time_scale=st.get("time_scale", 0.1, float),
        concurrency=st.get("concurrency", 48, int),
        c=st.get("c_ms", 15.0, float) / 1000,
        seed=st.get("seed", 0, int),
        mode=st.get("mode", "full"),
        digest=bool(args.digest),
    )
    reports = replay_corpus(sessions, contract, faults, config)
    deterministic = st.get("deterministic", False, _flag)
    _write_lines((r.canonical() if deterministic else r.to_record() for r in reports), st.require("out"))
    return 0


def cmd_analyze(args, st: Settings) -> int:
    records = _read_records(st.require("in_path"))
    what = args.what
    if what == "cdf":
        if args.timeline is not None:
            traces = [r for r in records if isinstance(r, TraceSession)]
            if len(traces) != len(records):
                raise CliError("--timeline needs a trace file")
            rows = analytics.quality_timeline(traces, args.timeline)
        else:
            report = analytics.distribution_report(records, grouped=args.grouped)
            rows = [{"sessions": report.sessions, "stalled_fraction": report.stalled_fraction}, *report.to_rows()]
    elif what == "satisfaction":
        contract = _read_contract(st.require("contract"))
        sat = analytics.satisfaction_report(records, contract)
        rows = [
            {
                "overall": sat.overall,
                "most_restrictive": sat.most_restrictive.to_dict() if sat.most_restrictive else None,
            },
            *sat.to_rows(),
        ]
    elif what == "bounds":
        bounds = analytics.duration_bound_report(records)
        rows = [{"events": len(bounds.rows), "max_ratio": bounds.max_ratio, "all_within": bounds.all_within}, *bounds.rows]
    else:
        schedule = [float(x) for x in st.require("schedule").split(",")]
        rows = [
            {"session": r["session"], "amount": analytics.price_session(r, schedule, args.exhausted_price)}
            for r in records
            if isinstance(r, dict)
        ]
    _write_lines(rows, st.get("out"))
    return 0


def cmd_sample_size(args, st: Settings) -> int:
    n = analytics.cochran_sample_size(
        st.require("confidence", float), st.require("margin", float), st.get("p", 0.5, float), rounding=args.rounding
    )
    print(n)
    return 0


# -- standalone endpoints ---------------------------------------------------------------------


async def _serve_until_stopped(duration: float | None, on_tick: Callable[[], None] | None = None) -> None:
    stop = asyncio.Event()
    loop = asyncio.get_running_loop()
    for sig in (signal.SIGINT, signal.SIGTERM):
        try:
            loop.add_signal_handler(sig, stop.set)
        except (NotImplementedError, RuntimeError):
            pass
    if duration is not None:
        loop.call_later(duration, stop.set)
    while not stop.is_set():
        try:
            await asyncio.wait_for(stop.wait(), timeout=2.0)
        except asyncio.TimeoutError:
            pass
        if on_tick is not None:
            on_tick()


def _listen(st: Settings) -> tuple[str, int]:
    try:
        return wire.parse_address(st.require("listen"))
    except wire.MalformedHeader as exc:
        raise CliError(f"--listen: {exc}") from exc


def _address(st: Settings, name: str) -> tuple[str, int]:
    try:
        return wire.parse_address(st.require(name))
    except wire.MalformedHeader as exc:
        raise CliError(f"--{name}: {exc}") from exc


def cmd_serve_auditor(args, st: Settings) -> int:
    contract = _read_contract(st.require("contract"))
    log_dir = st.require("log_dir")
    host, port = _listen(st)

    async def main():
        clock = Clock(st.get("time_scale", 1.0, float))
        auditor = Auditor(contract, AuditorConfig())
        service = AuditorService(auditor, clock, Tally())
        addr = await service.start(host, port)
        print(json.dumps({"listening": f"{addr[0]}:{addr[1]}"}), flush=True)
        try:
            await _serve_until_stopped(st.get("duration", None, float), lambda: auditor.write_logs(log_dir))
        finally:
            auditor.write_logs(log_dir)
            await service.stop()

    asyncio.run(main())
    return 0


def _load_chunkmaps(path: str) -> Callable[[str], ChunkMap]:
    """A JSON object of session -> rows, a bare row list for every session, or a trace file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(f"cannot read chunk map {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except ValueError:
        traces = {s.session_id: s.chunk_map() for s in load_trace(path)}
        return traces.__getitem__
    if isinstance(doc, list):
        shared = ChunkMap.from_list(doc)
        return lambda sid: shared
    if isinstance(doc, dict):
        maps = {sid: ChunkMap.from_list(rows) for sid, rows in doc.items()}
        return maps.__getitem__
    raise CliError("chunk map must be a list of rows or an object of session -> rows")


def cmd_serve_server_monitor(args, st: Settings) -> int:
    contract = _read_contract(st.require("contract"))
    chunkmaps = _load_chunkmaps(st.require("chunkmap"))
    auditor_addr = _address(st, "auditor")
    host, port = _listen(st)
    config = ServerConfig(c=st.get("c_ms", 15.0, float) / 1000)

    async def main():
        clock = Clock(st.get("time_scale", 1.0, float))
        service = ServerMonitorService(ServerMonitor(contract, chunkmaps, config), clock, Tally())
        addr = await service.start(auditor_addr, host, port)
        print(json.dumps({"listening": f"{addr[0]}:{addr[1]}"}), flush=True)
        try:
            await _serve_until_stopped(st.get("duration", None, float))
        finally:
            await service.stop()

    asyncio.run(main())
    return 0


def cmd_serve_video(args, st: Settings) -> int:
    sessions = {s.session_id: s for s in load_trace(st.require("trace"))}
    contract = _read_contract(st.require("contract"))
    auditor_addr = _address(st, "auditor")
    sniffer = _address(st, "sniffer") if st.get("sniffer") else None
    host, port = _listen(st)

    async def main():
        clock = Clock(st.get("time_scale", 1.0, float))
        video = VideoServer(
            sessions, clock, Tally(), contract=contract, auditor_addr=auditor_addr, ugovor_enabled=not args.no_ugovor
        )
        addr = await video.start(sniffer, host, port)
        print(json.dumps({"listening": f"{addr[0]}:{addr[1]}"}), flush=True)
        try:
            await _serve_until_stopped(st.get("duration", None, float))
        finally:
            await video.stop()

    asyncio.run(main())
    return 0


def cmd_run_client(args, st: Settings) -> int:
    sessions = _select(load_trace(st.require("trace")), args.session)
    server = _address(st, "server")
    options = ClientOptions(propose=not args.no_propose)

    async def main():
        clock = Clock(st.get("time_scale", 1.0, float))
        tally = Tally()
        rows = []
        for s in sessions:
            client = ClientEndpoint(s, clock, server, tally, options=options, seed=st.get("seed", 0, int))
            await client.run()
            mon = client.monitor
            rows.append(
                {
                    "session": s.session_id,
                    "engaged": mon.engaged,
                    "closed_cleanly": client.closed_cleanly,
                    "termination": client.termination,
                    "events": [r for r in mon.event_log if r["type"] == "event"],
                    "windows": [*mon.completed_windows(), mon.ledger.snapshot()] if mon.engaged else [],
                }
            )
        return rows

    _write_lines(asyncio.run(main()), st.get("out"))
    return 0


# -- parser -----------------------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="ugovor", description="Streaming contract monitoring toolkit.")
    parser.add_argument("--config", help="JSON file with default settings")
    parser.add_argument("--log-level", default="WARNING")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate-contract", help="check a contract document")
    p.add_argument("file")
    p.set_defaults(func=cmd_validate_contract)

    p = sub.add_parser("gen-corpus", help="write a seeded synthetic trace corpus")
    p.add_argument("--seed", type=int)
    p.add_argument("--sessions", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("plan-faults", help="script one dishonest behavior per suitable session")
    p.add_argument("--trace")
    p.add_argument("--contract")
    p.add_argument("--behavior", required=True, choices=sorted(BEHAVIOR_ROLES))
    p.add_argument("--count", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_plan_faults)

    p = sub.add_parser("replay", help="replay a trace over loopback with all endpoints")
    p.add_argument("--trace")
    p.add_argument("--contract")
    p.add_argument("--faults")
    p.add_argument("--latency", help="override every session's latency: DOWN_MS[:UP_MS]")
    p.add_argument("--time-scale", dest="time_scale", type=float)
    p.add_argument("--concurrency", type=int)
    p.add_argument("--c-ms", dest="c_ms", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--mode", choices=MODES)
    p.add_argument("--session")
    p.add_argument("--digest", action="store_true")
    p.add_argument("--deterministic", action="store_true", default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_replay)

    p = sub.add_parser("serve-auditor", help="run a standalone auditor")
    p.add_argument("--listen")
    p.add_argument("--contract")
    p.add_argument("--log-dir", dest="log_dir")
    p.add_argument("--time-scale", dest="time_scale", type=float)
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_serve_auditor)

    p = sub.add_parser("serve-server-monitor", help="run a standalone server monitor")
    p.add_argument("--listen")
    p.add_argument("--chunkmap")
    p.add_argument("--c-ms", dest="c_ms", type=float)
    p.add_argument("--auditor")
    p.add_argument("--contract")
    p.add_argument("--time-scale", dest="time_scale", type=float)
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_serve_server_monitor)

    p = sub.add_parser("serve-video", help="run a standalone video server with its sniffer")
    p.add_argument("--listen")
    p.add_argument("--trace")
    p.add_argument("--contract")
    p.add_argument("--auditor")
    p.add_argument("--sniffer")
    p.add_argument("--no-ugovor", action="store_true")
    p.add_argument("--time-scale", dest="time_scale", type=float)
    p.add_argument("--duration", type=float)
    p.set_defaults(func=cmd_serve_video)

    p = sub.add_parser("run-client", help="play trace sessions against a video server")
    p.add_argument("--server")
    p.add_argument("--trace")
    p.add_argument("--session")
    p.add_argument("--no-propose", action="store_true")
    p.add_argument("--time-scale", dest="time_scale", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_run_client)

    p = sub.add_parser("analyze", help="statistics over traces or replay reports")
    p.add_argument("what", choices=("cdf", "satisfaction", "bounds", "price"))
    p.add_argument("--in", dest="in_path")
    p.add_argument("--out")
    p.add_argument("--contract")
    p.add_argument("--grouped", action="store_true")
    p.add_argument("--timeline", type=float, help="bucket width for the mean-quality timeline")
    p.add_argument("--schedule", help="comma-separated price per window for each level")
    p.add_argument("--exhausted-price", dest="exhausted_price", type=float, default=0.0)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("sample-size", help="Cochran sample size")
    p.add_argument("--confidence", type=float)
    p.add_argument("--margin", type=float)
    p.add_argument("--p", type=float)
    p.add_argument("--rounding", choices=("nearest", "ceil"), default="nearest")
    p.set_defaults(func=cmd_sample_size)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.WARNING))
    try:
        settings = Settings(args)
        return args.func(args, settings)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        sys.stderr.write(json.dumps({"error": "UsageError", "message": str(exc)}) + "\n")
        return 2
    except (UgoVorError, OSError, ValueError) as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return 1


if __name__ == "__main__":
    sys.exit(main())
