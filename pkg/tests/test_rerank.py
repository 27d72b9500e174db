import logging
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from helpers import CORPUS, INDEX, SCRIPTED, replay_backend, router, scripted_transcript
from sure_qa.backend import ReplayEmbeddingBackend
from sure_qa.corpus import Passage
from sure_qa.errors import PipelineError
from sure_qa.rerank import (
    cosine,
    fit_tfidf,
    format_overlap_table,
    overlap_matrix,
    passage_text,
    rerank_passages,
    summarize_overlap,
    top1_pipeline,
)
from sure_qa.sure import run_generic_sum, run_sure


def test_idf_values():
    table = fit_tfidf(["a b", "a c", "a"])
    assert table.idf["a"] == pytest.approx(math.log(1 + 3 / 3))
    assert table.idf["b"] == pytest.approx(math.log(1 + 3 / 1))
    assert table.vector("a a b z") == pytest.approx({"a": 2 * math.log(2), "b": math.log(4)})


def test_cosine_hand_values():
    assert cosine({"x": 1.0}, {"x": 3.0}) == pytest.approx(1.0)
    assert cosine({"x": 1.0}, {"y": 1.0}) == 0.0
    assert cosine({"x": 1.0, "y": 1.0}, {"x": 1.0}) == pytest.approx(1 / math.sqrt(2))
    assert cosine([1, 0], [1, 1]) == pytest.approx(1 / math.sqrt(2))


def test_cosine_zero_vector_warns(caplog):
    with caplog.at_level(logging.WARNING):
        assert cosine({}, {"x": 1.0}) == 0.0
        assert cosine([0.0, 0.0], [1.0, 2.0]) == 0.0
    assert "zero vector" in caplog.text


def test_cosine_errors():
    with pytest.raises(ValueError):
        cosine([1, 2], [1, 2, 3])
    with pytest.raises(TypeError):
        cosine({"x": 1.0}, [1.0])


vectors = st.dictionaries(st.sampled_from("abcdef"), st.floats(0.01, 10), min_size=1)


@given(vectors, vectors)
def test_cosine_bounds_and_symmetry(a, b):
    c = cosine(a, b)
    assert -1e-12 <= c <= 1 + 1e-12
    assert c == pytest.approx(cosine(b, a))


def test_overlap_fixture_diagonal_dominates():
    candidates = ["Mount Everest", "K2 Karakoram"]
    summaries = [
        "Mount Everest in the Himalaya is the highest mountain, so Mount Everest answers it.",
        "K2 in the Karakoram range is very high; K2 Karakoram is the second highest.",
    ]
    m = overlap_matrix(candidates, summaries)
    assert min(m[0][0], m[1][1]) > max(m[0][1], m[1][0])


def test_overlap_shape_and_errors():
    assert overlap_matrix([], []) == []
    with pytest.raises(ValueError):
        overlap_matrix(["a"], ["a", "b"])


def test_summarize_overlap_and_table():
    summary = summarize_overlap([[[1.0, 0.0], [0.2, 0.8]], [[0.6, 0.4], [0.0, 1.0]]])
    np.testing.assert_allclose(summary["mean_matrix"], [[0.8, 0.2], [0.1, 0.9]])
    assert summary["diagonal_mean"] == pytest.approx(0.85)
    assert summary["off_diagonal_mean"] == pytest.approx(0.15)
    text = format_overlap_table(summary)
    assert "diagonal mean 0.8500" in text and "off-diagonal mean 0.1500" in text


def test_rerank_tfidf_order_and_ties():
    passages = [Passage("z", "", "apple"), Passage("b", "", "apple"), Passage("m", "", "pear pear")]
    ranked = rerank_passages("pear", passages)
    assert [p.id for p, _ in ranked] == ["m", "b", "z"]
    assert ranked[1][1] == ranked[2][1] == 0.0


def test_rerank_embedding_mode():
    passages = [Passage("a", "A", "x"), Passage("b", "B", "y")]
    embed = ReplayEmbeddingBackend.from_texts({
        "key": [1.0, 0.0], passage_text(passages[0]): [0.0, 1.0], passage_text(passages[1]): [1.0, 0.1],
    })
    ranked = rerank_passages("key", passages, mode="embedding", embed_backend=embed)
    assert [p.id for p, _ in ranked] == ["b", "a"]
    with pytest.raises(ValueError):
        rerank_passages("key", passages, mode="embedding")
    with pytest.raises(ValueError):
        rerank_passages("key", passages, mode="bm25")


def test_top1_with_sure_summary():
    case = SCRIPTED[1]
    sure = run_sure(case["question"], INDEX, CORPUS, n=3, backends=replay_backend(scripted_transcript()))
    backend = router({"baseline": "William Shakespeare"})
    trace = top1_pipeline(case["question"], INDEX, CORPUS, 3, sure, "tfidf", backend, key="sure")
    assert trace.method == "rerank-sure-tfidf"
    assert trace.extra["rerank_order"][0] == "p3"
    assert "Passage #1 Title: Hamlet" in backend.calls[0].prompt_echo
    assert "Passage #2" not in backend.calls[0].prompt_echo
    assert trace.final_answer == "William Shakespeare"


def test_top1_generic_generates_summary_when_missing():
    backend = router({"summarize": "Paris is the capital of France. [DONE]", "baseline": "Paris"})
    trace = top1_pipeline("What is the capital of France?", INDEX, CORPUS, 3, None, "tfidf", backend, key="generic")
    assert len(backend.calls) == 2
    assert trace.summaries == ["Paris is the capital of France."]
    assert trace.extra["rerank_order"][0] == "p1"


def test_top1_generic_reuses_trace():
    backend = router({"summarize": "Lyon is a French city. [DONE]", "baseline": "Lyon"})
    generic = run_generic_sum("What is the capital of France?", INDEX, CORPUS, 3, backend)
    before = len(backend.calls)
    trace = top1_pipeline("What is the capital of France?", INDEX, CORPUS, 3, generic, "tfidf", backend,
                          key="generic")
    assert len(backend.calls) == before + 1
    assert trace.extra["rerank_order"][0] == "p2"


def test_top1_requires_sure_trace_for_sure_key():
    with pytest.raises(PipelineError, match="needs a SuRe trace"):
        top1_pipeline("What is the capital of France?", INDEX, CORPUS, 3, None, "tfidf", router({}), key="sure")
