"""Whole sessions through client monitor, server monitor and auditor.

An honest session with stalls closes cleanly; a client that invents a
stall is caught and the session is terminated in that same window.

Run: python demos/03_sessions.py
"""

from __future__ import annotations

from ugovor.contract import parse_contract
from ugovor.harness import CorpusParams, generate_synthetic, plan_fault
from ugovor.harness.sim import simulate

CONTRACT = """
{ "window": 120,
  "resolution": [[["720p", 0.5], ["1080p", 1], ["4K", 1]],
                 [["720p", 0.7], ["1080p", 1], ["4K", 1]],
                 [["720p", 0.9], ["1080p", 1], ["4K", 1]]],
  "rebuffering": [1, 5, 10] }
"""


def main() -> None:
    contract = parse_contract(CONTRACT)

    corpus = generate_synthetic(CorpusParams(n_sessions=60), seed=11)
    honest = next(s for s in corpus if len(s.rebuffers) >= 2)
    report = simulate(honest, contract)
    print(f"honest session {honest.session_id}: {len(honest.chunks)} chunks, stalls at {[p for p, _ in honest.rebuffers]}")
    print(f"  outcome {report.outcome}")
    for ev in report.confirmed_rebuffers:
        print(f"  stall at pts {ev['pts']:g}: client saw {ev['client_duration']:.3f} s, server bound {ev['bound']:.3f} s")
    print(f"  control messages per event at most {report.max_messages_per_event}")

    liar = corpus[0]
    fault = plan_fault(liar, "FabricateEvent", contract.window_s)
    report = simulate(liar, contract, [fault])
    print(f"\nsession {liar.session_id} claims a stall at pts {fault.params['pts']:g} that never happened")
    print(f"  outcome {report.outcome}, reason {report.termination['reason']}, window {report.termination['window']}")

    fault = plan_fault(liar, "DelayAcks", contract.window_s)
    report = simulate(liar, contract, [fault])
    m = report.misbehavior[0]
    print(f"\nthe same client now holds back its acks by {fault.params['extra']:g} s")
    print(f"  server reports {m['reason']}: ack throughput {m['ack_throughput_bps'] / 1e6:.2f} Mb/s "
          f"for chunks encoded at {m['chunk_bitrate_bps'] / 1e6:.2f} Mb/s")


if __name__ == "__main__":
    main()
