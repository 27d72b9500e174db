import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import METRIC_FIXTURE
from oracles import squad_compute_exact, squad_compute_f1, squad_max_over_golds
from sure_qa.errors import CorpusError
from sure_qa.evaluation import (
    QAExample,
    bootstrap_ci,
    evaluate_run,
    exact_match,
    f1_score,
    format_report,
    load_dataset,
    normalize_answer,
    score_predictions,
    subsample,
    write_dataset,
)


@pytest.mark.parametrize("prediction, golds", METRIC_FIXTURE)
def test_metrics_match_reference(prediction, golds):
    assert exact_match(prediction, golds) == squad_max_over_golds(squad_compute_exact, prediction, golds)
    assert abs(f1_score(prediction, golds) - squad_max_over_golds(squad_compute_f1, prediction, golds)) <= 1e-9


def test_fixture_is_large_enough():
    assert len(METRIC_FIXTURE) >= 20


def test_headline_cases():
    assert f1_score("Barack Obama", ["Obama"]) == pytest.approx(2 / 3, abs=1e-12)
    assert exact_match("Barack Obama", ["Obama"]) == 0
    assert exact_match("the Eiffel Tower", ["Eiffel Tower"]) == 1
    assert exact_match("An apple", ["apple"]) == 1


@pytest.mark.parametrize("text, expected", [
    ("The  Quick, brown FOX!", "quick brown fox"),
    ("a an the", ""),
    ("theatre", "theatre"),
    ("don't", "dont"),
])
def test_normalize(text, expected):
    assert normalize_answer(text) == expected


@settings(max_examples=300, deadline=None)
@given(st.text(max_size=40), st.lists(st.text(max_size=40), min_size=1, max_size=3))
def test_metrics_match_reference_property(prediction, golds):
    assert exact_match(prediction, golds) == squad_max_over_golds(squad_compute_exact, prediction, golds)
    assert abs(f1_score(prediction, golds) - squad_max_over_golds(squad_compute_f1, prediction, golds)) <= 1e-9


@given(st.text(max_size=40))
def test_normalize_idempotent(text):
    assert normalize_answer(normalize_answer(text)) == normalize_answer(text)


@given(st.text(max_size=30), st.lists(st.text(max_size=30), min_size=1, max_size=3))
def test_em_implies_full_f1(prediction, golds):
    f1 = f1_score(prediction, golds)
    assert 0.0 <= f1 <= 1.0
    if exact_match(prediction, golds):
        assert f1 == 1.0


# -- bootstrap -------------------------------------------------------------------


@pytest.mark.parametrize("value", [0.0, 1.0, 0.37])
def test_bootstrap_zero_variance(value):
    lo, hi = bootstrap_ci([value] * 50, seed=3)
    assert lo == hi == pytest.approx(value, abs=1e-12)


def test_bootstrap_bernoulli():
    values = np.random.default_rng(11).integers(0, 2, size=500)
    lo, hi = bootstrap_ci(values, iterations=1000, seed=5)
    mean = values.mean()
    assert lo <= mean <= hi
    assert 0 < hi - lo < 0.2


def test_bootstrap_deterministic_per_seed():
    values = np.random.default_rng(0).random(100)
    assert bootstrap_ci(values, seed=42) == bootstrap_ci(values, seed=42)
    assert bootstrap_ci(values, seed=42) != bootstrap_ci(values, seed=43)


def test_bootstrap_errors():
    with pytest.raises(ValueError):
        bootstrap_ci([])
    with pytest.raises(ValueError):
        bootstrap_ci([1.0], level=1.5)


# -- datasets and reports ------------------------------------------------------------


def test_dataset_round_trip(tmp_path):
    examples = [QAExample("a", "Who?", ("X", "Y")), QAExample("b", "Où?", ("Zürich",))]
    write_dataset(examples, tmp_path / "d.jsonl")
    assert load_dataset(tmp_path / "d.jsonl") == examples


def test_dataset_synthetic_ids_and_errors(tmp_path):
    path = tmp_path / "d.jsonl"
    path.write_text(json.dumps({"question": "Q?", "answers": "A"}) + "\n")
    assert load_dataset(path) == [QAExample("q1", "Q?", ("A",))]
    path.write_text(json.dumps({"question": "Q?", "answers": []}) + "\n")
    with pytest.raises(CorpusError, match="line 1"):
        load_dataset(path)
    path.write_text("\n".join(json.dumps({"id": "x", "question": "Q?", "answers": ["A"]}) for _ in range(2)))
    with pytest.raises(CorpusError, match="duplicate id x"):
        load_dataset(path)


def test_subsample_deterministic():
    examples = [QAExample(str(i), "q", ("a",)) for i in range(100)]
    a = subsample(examples, 10, seed=1)
    assert a == subsample(examples, 10, seed=1)
    assert len({e.id for e in a}) == 10
    assert [int(e.id) for e in a] == sorted(int(e.id) for e in a)
    with pytest.raises(ValueError):
        subsample(examples, 101)


def test_score_and_evaluate(tmp_path):
    dataset = [QAExample("1", "q", ("Paris",)), QAExample("2", "q", ("Obama",)), QAExample("3", "q", ("x",))]
    traces = tmp_path / "run.jsonl"
    traces.write_text("\n".join(json.dumps(r) for r in [
        {"id": "1", "method": "sure", "final_answer": "paris"},
        {"id": "2", "method": "sure", "final_answer": "Barack Obama"},
        {"id": "3", "method": "sure", "final_answer": None},
    ]) + "\n")
    report = evaluate_run(traces, dataset, seed=0)
    assert report.em == [1, 0, 0]
    assert report.f1 == pytest.approx([1.0, 2 / 3, 0.0])
    assert report.em_mean == pytest.approx(1 / 3)
    assert report.method == "sure"
    assert report.em_ci[0] <= report.em_mean <= report.em_ci[1]
    table = format_report([report])
    assert "33.3" in table and "55.6" in table


def test_unknown_prediction_id():
    with pytest.raises(KeyError):
        score_predictions([("zz", "a")], [QAExample("1", "q", ("a",))])
