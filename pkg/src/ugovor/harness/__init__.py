"""Trace-driven loopback replay of monitored streaming sessions."""

from ugovor.harness.faults import FaultScript, load_faults, plan_fault, write_faults
from ugovor.harness.generate import CorpusParams, InvalidParameters, generate_synthetic
from ugovor.harness.replay import ReplayConfig, ReplayReport, replay, replay_corpus
from ugovor.harness.trace import SchemaError, TraceSession, load_trace, write_trace

__all__ = [
    "CorpusParams",
    "FaultScript",
    "InvalidParameters",
    "ReplayConfig",
    "ReplayReport",
    "SchemaError",
    "TraceSession",
    "generate_synthetic",
    "load_faults",
    "load_trace",
    "plan_fault",
    "replay",
    "replay_corpus",
    "write_faults",
    "write_trace",
]
