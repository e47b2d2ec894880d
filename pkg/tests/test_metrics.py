import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metrics_oracle import brute_counts, brute_scores
from stormlatent.metrics import (
    CSV_HEADER,
    NA,
    ContingencyTable,
    ScoreTable,
    contingency,
    evaluate_run,
    scores,
)


def test_worked_example():
    s = scores(ContingencyTable(tp=2, fp=1, fn=1, tn=6))
    assert s["POD"] == pytest.approx(2 / 3)
    assert s["CSI"] == pytest.approx(0.5)
    assert s["HSS"] == pytest.approx(11 / 42)
    assert s["FBI"] == pytest.approx(1.0)


def test_no_events_anywhere():
    s = scores(ContingencyTable(tn=10))
    assert s["POD"] == NA and s["CSI"] == NA and s["FBI"] == NA
    assert s["HSS"] == 0.0


def test_perfect_forecast_hss_forms():
    t = ContingencyTable(tp=5, tn=20)
    assert scores(t)["HSS"] == pytest.approx(0.5)
    assert scores(t, hss_standard=True)["HSS"] == pytest.approx(1.0)


def test_inclusive_threshold_and_errors():
    assert contingency(np.array([0.2]), np.array([0.2]), 0.2) == ContingencyTable(tp=1)
    with pytest.raises(ValueError):
        contingency(np.zeros(3), np.zeros(4), 0.2)
    with pytest.raises(ValueError):
        ContingencyTable(tp=-1)


def _random_grid(rng):
    dry = rng.random((16, 16)) < 0.7
    return np.where(dry, 0.0, rng.gamma(0.8, 3.0, (16, 16)))


def test_matches_brute_force_on_random_grids():
    rng = np.random.default_rng(0)
    for _ in range(200):
        truth, pred = _random_grid(rng), _random_grid(rng)
        th = float(rng.choice([0.2, 1.0, 2.0, 4.0, 8.0]))
        c = contingency(pred, truth, th)
        assert (c.tp, c.fp, c.fn, c.tn) == brute_counts(pred, truth, th)
        got, want = scores(c, hss_standard=True), brute_scores(c.tp, c.fp, c.fn, c.tn)
        for k in ("POD", "CSI", "FBI"):
            assert (got[k] == NA) == (want[k] is None)
            if want[k] is not None:
                assert got[k] == pytest.approx(want[k], abs=1e-12)
        if want["HSS_standard"] is not None and c.tp + c.fp + c.fn:
            assert got["HSS"] == pytest.approx(want["HSS_standard"], abs=1e-12)


def test_pooled_counts_are_sums_and_scores_use_pooled_counts():
    rng = np.random.default_rng(1)
    preds = rng.gamma(0.5, 2.0, (3, 2, 8, 8))
    truths = rng.gamma(0.5, 2.0, (3, 2, 8, 8))
    table = evaluate_run(preds, truths, (1.0,))
    for k in (1, 2):
        total = ContingencyTable()
        for s in range(3):
            total = total + contingency(preds[s, k - 1], truths[s, k - 1], 1.0)
        assert table.tables[(k, 1.0)] == total
        assert table.score(k, 1.0) == scores(total)


def test_evaluate_run_errors_and_csv():
    with pytest.raises(ValueError):
        evaluate_run(np.zeros((2, 3, 4, 4)), np.zeros((1, 3, 4, 4)))
    with pytest.raises(ValueError):
        evaluate_run([np.zeros((3, 4, 4))], [np.zeros((2, 4, 4))])
    with pytest.raises(ValueError):
        evaluate_run([], [])
    table = evaluate_run(np.zeros((1, 2, 4, 4)), np.zeros((1, 2, 4, 4)), (0.2, 1.0))
    lines = table.to_csv().splitlines()
    assert lines[0] == CSV_HEADER
    assert lines[1] == "1,0.2,NA,NA,0.0,NA"
    assert lines[-1].startswith("mean,1.0,NA,NA,0.0,NA")
    assert len(lines) == 1 + 4 + 2


def test_mean_skips_na():
    t = ScoreTable((1.0,), {(1, 1.0): ContingencyTable(tp=1, fn=1), (2, 1.0): ContingencyTable(tn=4)})
    assert t.mean("POD", 1.0) == 0.5
    assert np.isnan(t.mean("POD", 1.0, leads=[2]))


@settings(max_examples=100, deadline=None)
@given(
    arrays(np.float64, (6, 6), elements=st.floats(0, 20)),
    arrays(np.float64, (6, 6), elements=st.floats(0, 20)),
    st.floats(0.01, 10),
    st.floats(0.01, 10),
)
def test_pod_monotone_in_threshold(pred, truth, a, b):
    """Raising the threshold only removes forecast events, so POD can't rise unless the observed set shrinks too.

    With the truth held binary (all events far above both thresholds) the observed set is fixed.
    """
    lo, hi = sorted((a, b))
    truth = np.where(truth > 10, 100.0, 0.0)
    p_lo = scores(contingency(pred, truth, lo))["POD"]
    p_hi = scores(contingency(pred, truth, hi))["POD"]
    if p_lo != NA:
        assert p_hi <= p_lo + 1e-12


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 50), st.integers(0, 50), st.integers(0, 50), st.integers(0, 50))
def test_score_ranges(tp, fp, fn, tn):
    s = scores(ContingencyTable(tp, fp, fn, tn), hss_standard=True)
    for k in ("POD", "CSI"):
        if s[k] != NA:
            assert 0 <= s[k] <= 1
    if s["FBI"] != NA:
        assert s["FBI"] >= 0
    if s["HSS"] != NA:
        assert -1 - 1e-12 <= s["HSS"] <= 1 + 1e-12
