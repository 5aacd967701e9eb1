from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from ptbench.evaluator import (
    evaluate,
    extract_flexible,
    extract_strict,
    format_gap,
    implication_audit,
    rank_correlation,
    score_text,
    spread,
    summarize,
)
from ptbench import vocab
from ptbench.taskdata import generate_problems
from stubs import gold_policy


@pytest.mark.parametrize(
    "text,expected",
    [("so #### 42", 42), ("the answer is 42.", None), ("#### 42 junk #### 17", 17), ("#### x", None), ("#### -5", -5)],
)
def test_strict_extraction(text, expected):
    assert extract_strict(text) == expected


@pytest.mark.parametrize("text,expected", [("the answer is 42.", 42), ("no digits here", None), ("first 7 then 9", 9)])
def test_flexible_extraction(text, expected):
    assert extract_flexible(text) == expected


def test_format_gap_arithmetic():
    assert format_gap(85.82, 80.97) == pytest.approx(4.85, abs=1e-9)


def test_gold_policy_scores_perfectly():
    problems = generate_problems(1, 40)
    summary, records = evaluate(gold_policy(problems), problems)
    assert summary.strict_accuracy == summary.flexible_accuracy == 100.0
    assert summary.format_gap == 0.0 and summary.n_problems == 40
    assert not implication_audit(records)


def test_implication_holds_on_model_outputs(small_model):
    problems = generate_problems(2, 64)
    _, records = evaluate(small_model, problems)
    assert implication_audit(records) == []


@given(st.lists(st.sampled_from(vocab.TOKENS[1:]), max_size=20), st.integers(0, 99))
def test_strict_correct_implies_flexible_when_marker_is_last_number(words, gold):
    rec = score_text("x", vocab.encode(words), gold)
    if rec.strict_correct and rec.strict_extracted == rec.flexible_extracted:
        assert rec.flexible_correct


def test_summary_of_empty_records():
    assert summarize([]).n_problems == 0


def test_spread_values():
    assert spread([27.04, 26.72, 26.64, 26.58, 26.50]) == pytest.approx(0.54, abs=1e-9)
    assert spread([58.00, 54.36, 51.15, 49.08, 38.67]) == pytest.approx(19.33, abs=1e-9)
    assert spread([3.0]) == 0.0
    with pytest.raises(ValueError):
        spread([])


def test_rank_correlation_examples():
    a = {"SGRPO": 5, "SFT": 4, "KTO": 3, "DPO": 2, "SimPO": 1}
    b = {"SFT": 5, "SimPO": 4, "KTO": 3, "SGRPO": 2, "DPO": 1}
    assert rank_correlation(a, b) == 0.0
    assert rank_correlation(a, a) == 1.0
    rev = {k: -v for k, v in a.items()}
    assert rank_correlation(a, rev) == -1.0


@given(st.dictionaries(st.text(min_size=1, max_size=3), st.floats(-100, 100), min_size=3, max_size=8))
def test_rank_correlation_matches_scipy(d):
    from scipy.stats import spearmanr

    vals = np.array(list(d.values()))
    if np.ptp(vals) == 0:
        return
    other = {k: (i * 7) % 5 + 0.5 * i for i, k in enumerate(d)}
    expected = spearmanr(list(d.values()), [other[k] for k in d]).statistic
    assert rank_correlation(d, other) == pytest.approx(expected, abs=1e-12)
