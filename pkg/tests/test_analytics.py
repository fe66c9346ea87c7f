from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import AVERAGE_TEXT, make_trace
from oracles import Z_TABLE, cochran, level_ok, trace_window_totals
from ugovor.analytics import (
    EmptyCorpus,
    InvalidParameters,
    box_quantiles,
    cochran_sample_size,
    distribution_report,
    duration_bound_report,
    empirical_cdf,
    most_restrictive_contract,
    price_session,
    satisfaction_report,
    trace_windows,
)
from ugovor.contract import contract_from_dict
from ugovor.harness import CorpusParams, generate_synthetic


@pytest.fixture(scope="module")
def corpus():
    return generate_synthetic(CorpusParams(n_sessions=120), seed=3)


def alternating(n_chunks, switches):
    """720p/1080p chunks with exactly ``switches`` changes, all in the first chunks."""
    res = []
    for i in range(n_chunks):
        res.append("1080p" if i <= switches and i % 2 else "720p")
    if switches % 2 == 1:
        res[switches + 1 :] = ["1080p"] * (n_chunks - switches - 1)
    return res


class TestDistributions:
    def test_cdf_step_at_five_switches_per_minute(self):
        trace = make_trace(alternating(60, 10))
        assert trace.resolution_switches() == 10 and trace.duration == 120.0
        cdf = distribution_report([trace]).cdfs["switches_per_minute"]
        assert cdf.values == [5.0] and cdf.at(4.99) == 0.0 and cdf.at(5.0) == 1.0

    def test_cdf_counts_ties_once(self):
        cdf = empirical_cdf("x", [3.0, 1.0, 1.0, 2.0])
        assert (cdf.values, cdf.fractions) == ([1.0, 2.0, 3.0], [0.5, 0.75, 1.0])

    def test_box_quantiles_nearest_rank(self):
        q = box_quantiles(list(range(1, 101)))
        assert q == {"p5": 5, "p25": 25, "p50": 50, "p75": 75, "p95": 95}

    def test_box_quantiles_empty(self):
        with pytest.raises(EmptyCorpus):
            box_quantiles([])

    def test_stalled_fraction_matches_count(self, corpus):
        report = distribution_report(corpus)
        assert report.stalled_fraction == sum(1 for s in corpus if s.rebuffers) / len(corpus)

    def test_grouped_quantiles_per_group(self, corpus):
        report = distribution_report(corpus, grouped=True)
        assert set(report.groups) == {s.group for s in corpus}


class TestSatisfaction:
    def test_permissive_contract_always_satisfied(self, corpus):
        labels = sorted({c.resolution for s in corpus for c in s.chunks})
        permissive = contract_from_dict({"window": 120, "resolution": [[[l, 1] for l in labels]], "rebuffering": [1000]})
        assert satisfaction_report(corpus, permissive).overall == 1.0

    def test_synthesized_contract_is_satisfied_by_its_corpus(self, corpus):
        synthesized = most_restrictive_contract(corpus)
        assert satisfaction_report(corpus, synthesized).overall == 1.0

    def test_worst_stall_count_sets_the_cap(self):
        trace = make_trace(["720p"] * 50, stalls={i: 0.5 for i in range(1, 34)})
        synthesized = most_restrictive_contract([trace])
        assert synthesized.rebuffering_caps == (33,)

    def test_average_contract_against_oracle(self, corpus, average_contract):
        doc = json.loads(AVERAGE_TEXT)
        report = satisfaction_report(corpus, average_contract)
        for s in corpus:
            windows = trace_window_totals([(c.pts, c.length, c.resolution) for c in s.chunks], s.rebuffers, 120)
            # caps on cumulative seconds are monotone, so the final totals decide exhaustion
            ok = all(
                level_ok(doc, 0, [("play", l, v) for l, v in played.items()] + [("stall",)] * stalls)
                for played, stalls in windows
            )
            assert report.sessions[s.session_id] == ok

    def test_trace_windows_against_oracle(self, corpus):
        for s in corpus[:20]:
            ours = trace_windows(s, 120.0)
            ref = trace_window_totals([(c.pts, c.length, c.resolution) for c in s.chunks], s.rebuffers, 120)
            assert len(ours) == len(ref)
            for w, (played, stalls) in zip(ours, ref):
                assert w.rebuffer_count == stalls
                assert w.played_s == pytest.approx({k: float(v) for k, v in played.items()})


class TestBounds:
    def test_ratio(self):
        report = {"session": "s", "confirmed_rebuffers": [{"pts": 2.0, "client_duration": 1.0, "bound": 1.015}]}
        out = duration_bound_report([report])
        assert out.max_ratio == pytest.approx(0.985, abs=1e-3) and out.all_within

    def test_traces_rejected(self, corpus):
        with pytest.raises(TypeError):
            duration_bound_report(corpus[:1])


SCHEDULE = (1.0, 0.75, 0.5)


def windows(*levels):
    return [
        {"window": i, "level": 3 if lv == "X" else lv, "exhausted": lv == "X"} for i, lv in enumerate(levels)
    ]


class TestPricing:
    def test_all_top_level(self):
        assert price_session({"windows": windows(0, 0, 0)}, SCHEDULE) == 3.0

    def test_downgrades_and_exhaustion(self):
        assert price_session({"windows": windows(0, 2, "X")}, SCHEDULE) == 1.5

    def test_termination_bills_only_finished_windows(self):
        report = {"windows": windows(0, 0, 0), "termination": {"reason": "Dispute", "window": 1}}
        assert price_session(report, SCHEDULE) == 1.0

    def test_missing_price(self):
        with pytest.raises(InvalidParameters):
            price_session({"windows": windows(2)}, (1.0,))


class TestCochran:
    def test_customary_value(self):
        assert cochran_sample_size(0.95, 0.05) == 384

    def test_conservative_rounding(self):
        assert cochran_sample_size(0.95, 0.05, 0.1, rounding="ceil") == 139
        assert cochran_sample_size(0.95, 0.05, rounding="ceil") == 385

    def test_degenerate_proportion(self):
        assert cochran_sample_size(0.95, 0.05, 0.0) == 0

    @pytest.mark.parametrize("conf", sorted(Z_TABLE))
    def test_against_table_z(self, conf):
        for p in (0.1, 0.3, 0.5):
            assert abs(cochran_sample_size(conf, 0.05, p, rounding="ceil") - cochran(conf, 0.05, p)) <= 1.5

    def test_z_anchor(self):
        # 1.959964 squared times 0.25 over 0.0025
        assert cochran_sample_size(0.95, 0.01) == round(1.959964**2 * 0.25 / 0.0001)

    def test_monotone_on_grid(self):
        margins = [0.01 + 0.005 * i for i in range(10)]
        confs = [0.80 + 0.019 * j for j in range(10)]
        for c in confs:
            ns = [cochran_sample_size(c, m) for m in margins]
            assert ns == sorted(ns, reverse=True)
        for m in margins:
            ns = [cochran_sample_size(c, m) for c in confs]
            assert ns == sorted(ns)

    @given(st.floats(0.0, 0.5), st.floats(0.0, 0.5))
    def test_symmetric_and_peaked_at_half(self, a, b):
        lo, hi = sorted((a, b))
        assert cochran_sample_size(0.95, 0.05, lo) <= cochran_sample_size(0.95, 0.05, hi)
        assert cochran_sample_size(0.95, 0.05, lo) == cochran_sample_size(0.95, 0.05, 1 - lo)

    @pytest.mark.parametrize("args", [(1.0, 0.05), (0.95, 0.0), (0.95, 0.05, 1.5)])
    def test_invalid(self, args):
        with pytest.raises(InvalidParameters):
            cochran_sample_size(*args)
