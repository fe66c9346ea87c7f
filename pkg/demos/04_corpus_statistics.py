"""Corpus-level numbers: how many sessions to sample, what they look like,
and how a contract would fare against them.

Run: python demos/04_corpus_statistics.py
"""

from __future__ import annotations

from ugovor.analytics import (
    box_quantiles,
    cochran_sample_size,
    distribution_report,
    most_restrictive_contract,
    satisfaction_report,
)
from ugovor.contract import parse_contract
from ugovor.harness import CorpusParams, generate_synthetic

AVERAGE = """
{ "window": 120,
  "resolution": [[["240p", 0.09], ["360p", 0.03], ["480p", 0.08], ["720p", 0.80], ["1080p", 1]]],
  "rebuffering": [0] }
"""


def main() -> None:
    n = cochran_sample_size(0.95, 0.05)
    print(f"sessions needed for a 5% margin at 95% confidence: {n}")

    corpus = generate_synthetic(CorpusParams(n_sessions=n), seed=1)
    report = distribution_report(corpus)
    print(f"stalled sessions: {report.stalled_fraction:.1%}")
    for metric, table in report.cdfs.items():
        if table.values:
            q = box_quantiles(table.values)
            print(f"  {metric:>22}: median {q['p50']:.2f}, 5th {q['p5']:.2f}, 95th {q['p95']:.2f}")

    average = parse_contract(AVERAGE)
    sat = satisfaction_report(corpus, average)
    print(f"\nsessions that never exhaust the average-quality contract: {sat.overall:.1%}")
    strict = most_restrictive_contract(corpus)
    print(f"tightest single-level contract this corpus always meets: {strict.to_text()}")


if __name__ == "__main__":
    main()
