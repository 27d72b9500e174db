"""Summarized-retrieval question answering with LLM verification."""

from .bm25 import InvertedIndex, RetrievedSet, bm25_score, build_index, retrieve
from .corpus import Corpus, Passage, ingest_jsonl, tokenize
from .evaluation import (
    MetricsReport,
    QAExample,
    bootstrap_ci,
    evaluate_run,
    exact_match,
    f1_score,
    load_dataset,
    normalize_answer,
    subsample,
)
from .sure import (
    PredictionTrace,
    check_validity,
    generate_candidates,
    rank_pairwise,
    run_base,
    run_generic_sum,
    run_mcq,
    run_no_retrieval,
    run_sure,
    select_answer,
    summarize_conditional,
)

__version__ = "0.1.0"
