import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ladle.errors import InvalidParams, ParseError, SuiteMismatch
from ladle.evaluation import (REPORT_FIELDS, ClassRow, SuiteReport, TrialSuite, aggregate,
                              check_gates, compare_scales, emit_report, read_report, run_suite,
                              trial_world, wilson_interval)
from ladle.runtime import ArcFollowerPolicy, EpisodeOutcome, Models

Z95 = 1.959963984540054


def wilson_by_hand(k, n, z=Z95):
    p = k / n
    den = 1 + z * z / n
    mid = (p + z * z / (2 * n)) / den
    half = z / den * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n))
    return mid - half, mid + half


def out(targets, obstacles, success=None):
    ok = success if success is not None else False
    return EpisodeOutcome(ok, 100, targets, obstacles, "success" if ok else "timeout")


# ------------------------------------------------------------------ #
# metrics
# ------------------------------------------------------------------ #
def test_aggregate_multi_object_metrics():
    # two-target row: (2,0) success, (2,1), (1,0), (1,1), (0,0)
    outs = [out(2, 0, True), out(2, 1), out(1, 0), out(1, 1), out(0, 0)]
    row = aggregate("cube", outs, 2)
    assert row.n_trials == 5 and row.successes == 1
    assert row.avg_targets == pytest.approx(6 / 5, abs=0) and row.avg_obstacles == 2 / 5
    assert (row.success_wo_obs, row.success_w_obs) == (2, 1)


def test_aggregate_empty():
    row = aggregate("x", [], 1)
    assert (row.n_trials, row.successes, row.avg_targets, row.rate) == (0, 0, 0.0, 0.0)


@pytest.mark.parametrize("k,n", [(0, 20), (1, 20), (17, 20), (20, 20), (84, 100), (3, 7)])
def test_wilson_matches_closed_form(k, n):
    lo, hi = wilson_interval(k, n)
    elo, ehi = wilson_by_hand(k, n)
    assert lo == pytest.approx(elo, abs=1e-12) and hi == pytest.approx(ehi, abs=1e-12)


@given(st.integers(1, 500), st.data())
def test_wilson_brackets_rate(n, data):
    k = data.draw(st.integers(0, n))
    lo, hi = wilson_interval(k, n)
    assert 0.0 <= lo <= k / n <= hi <= 1.0


# ------------------------------------------------------------------ #
# suites
# ------------------------------------------------------------------ #
def test_from_mapping_and_validation():
    s = TrialSuite.from_mapping({"name": "n", "n_trials": "3", "classes": "apple, cork",
                                 "gate_min_rate": "0.5", "severity": "severe"})
    assert (s.n_trials, s.classes, s.gate_min_rate, s.severity) == (3, ("apple", "cork"), 0.5,
                                                                    "severe")
    with pytest.raises(InvalidParams):
        TrialSuite.from_mapping({"bogus": "1"})
    with pytest.raises(InvalidParams):
        TrialSuite(classes=("pebble",))
    with pytest.raises(InvalidParams):
        TrialSuite(n_trials=0)


def test_trial_world_profile_and_seed():
    s = TrialSuite(n_trials=2, classes=("strawberry",), seed_base=40)
    a, b = trial_world(s, "strawberry", 1), trial_world(s, "strawberry", 1)
    t = a.target_ids()[0]
    assert a.radius[a.index_of(t)] == 0.018
    np.testing.assert_array_equal(a.pos, b.pos)
    assert not np.array_equal(a.pos, trial_world(s, "strawberry", 0).pos)


class RandF:
    def generate(self, r, rho, rng):
        return 0.01 + 0.005 * rng.random(), 0.02 * rng.random()


def test_run_suite_independent_of_workers(tmp_path):
    suite = TrialSuite("w", n_trials=14, classes=("apple", "cork"), seed_base=300)
    m = Models(RandF(), ArcFollowerPolicy())
    one = run_suite(suite, m, workers=1)
    two = run_suite(suite, m, workers=2)
    emit_report(one, tmp_path / "a.csv")
    emit_report(two, tmp_path / "b.csv")
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    for cls in suite.classes:
        assert [o.success for o in one.outcomes[cls]] == [o.success for o in two.outcomes[cls]]
        assert one.row(cls).successes == sum(o.success for o in one.outcomes[cls])


def test_gates():
    report = SuiteReport("s", [ClassRow("a", 10, 9, 1, 0, 9, 9), ClassRow("b", 10, 5, 1, 0, 5, 5)])
    assert report.average_rate == pytest.approx(0.7)
    assert check_gates(TrialSuite(gate_min_rate=0.7), report) == []
    assert len(check_gates(TrialSuite(gate_min_rate=0.71), report)) == 1
    assert check_gates(TrialSuite(), report) == []


# ------------------------------------------------------------------ #
# reports
# ------------------------------------------------------------------ #
def test_report_round_trip(tmp_path):
    rep = SuiteReport("s", [ClassRow("apple", 20, 17, 0.85, 0.1, 17, 15),
                            ClassRow("cork", 20, 20, 1.0, 0.0, 20, 20)])
    emit_report(rep, tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text()
    assert text.splitlines()[0] == ",".join(REPORT_FIELDS)
    assert text.splitlines()[1].startswith("s,apple,20,17,0.8500,")
    back = read_report(tmp_path / "r.csv")
    assert back.suite == "s"
    assert [(r.cls, r.n_trials, r.successes, r.success_wo_obs, r.success_w_obs)
            for r in back.rows] == [("apple", 20, 17, 17, 15), ("cork", 20, 20, 20, 20)]
    assert back.rows[0].avg_obstacles == 0.1


def test_empty_report_is_header_only(tmp_path):
    emit_report(SuiteReport("e"), tmp_path / "e.csv")
    assert (tmp_path / "e.csv").read_text() == ",".join(REPORT_FIELDS) + "\n"
    assert read_report(tmp_path / "e.csv").rows == []


def test_read_report_errors(tmp_path):
    p = tmp_path / "bad.csv"
    p.write_text("")
    with pytest.raises(ParseError):
        read_report(p)
    p.write_text("a,b\n")
    with pytest.raises(ParseError):
        read_report(p)
    p.write_text(",".join(REPORT_FIELDS) + "\ns,apple,twenty,1,0,0,0,0,0,0,0\n")
    with pytest.raises(ParseError):
        read_report(p)


def test_compare_scales():
    small = SuiteReport("s", [ClassRow("a", 20, 12, 0, 0, 0, 0), ClassRow("b", 20, 12, 0, 0, 0, 0),
                              ClassRow("c", 20, 10, 0, 0, 0, 0)])
    large = SuiteReport("l", [ClassRow("a", 20, 16, 0, 0, 0, 0), ClassRow("b", 20, 12, 0, 0, 0, 0),
                              ClassRow("c", 20, 9, 0, 0, 0, 0)])
    cmp = compare_scales(small, large)
    assert [round(d, 12) for *_, d in cmp.rows] == [0.2, 0.0, -0.05]
    assert (cmp.improved, cmp.regressed, cmp.unchanged) == (1, 1, 1)
    assert cmp.average_delta == pytest.approx(0.05)
    assert "average delta +0.0500" in cmp.summary()
    with pytest.raises(SuiteMismatch):
        compare_scales(small, SuiteReport("l", large.rows[:2]))
