"""Passage reranking by similarity to a key text, and candidate/summary overlap.

TF-IDF vectors use raw term counts times ``ln(1 + docs / df)`` over the
documents they were fitted on. Dense mode asks an embedding backend.
"""

from __future__ import annotations

import logging
import math
from collections import Counter
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from . import prompts
from .bm25 import InvertedIndex, retrieve
from .corpus import Corpus, Passage, tokenize
from .errors import PipelineError
from .sure import PredictionTrace, _ask, _resolve, strip_done

logger = logging.getLogger(__name__)

MODES = ("tfidf", "embedding")
KEYS = ("sure", "generic", "question")


@dataclass(frozen=True)
class IdfTable:
    idf: dict[str, float]
    df: dict[str, int]
    doc_count: int

    def vector(self, text: str) -> dict[str, float]:
        counts = Counter(tokenize(text))
        # Terms unseen at fit time get no weight.
        return {t: c * self.idf[t] for t, c in counts.items() if t in self.idf}


def fit_tfidf(documents: Sequence[str]) -> IdfTable:
    if not documents:
        raise ValueError("fit_tfidf needs at least one document")
    df: Counter[str] = Counter()
    for doc in documents:
        df.update(set(tokenize(doc)))
    n = len(documents)
    idf = {t: math.log(1.0 + n / d) for t, d in sorted(df.items())}
    return IdfTable(idf, dict(sorted(df.items())), n)


def cosine(a, b) -> float:
    """Cosine similarity of two sparse (dict) or dense (sequence) vectors.

    A zero vector on either side yields 0.0 and logs a warning.
    """
    if isinstance(a, Mapping) or isinstance(b, Mapping):
        if not (isinstance(a, Mapping) and isinstance(b, Mapping)):
            raise TypeError("cannot mix sparse and dense vectors")
        small, large = (a, b) if len(a) <= len(b) else (b, a)
        dot = sum(w * large[t] for t, w in small.items() if t in large)
        na = math.sqrt(sum(w * w for w in a.values()))
        nb = math.sqrt(sum(w * w for w in b.values()))
    else:
        va = np.asarray(a, dtype=float)
        vb = np.asarray(b, dtype=float)
        if va.shape != vb.shape:
            raise ValueError(f"dimension mismatch: {va.shape} vs {vb.shape}")
        dot = float(va @ vb)
        na = float(np.linalg.norm(va))
        nb = float(np.linalg.norm(vb))
    if na == 0.0 or nb == 0.0:
        logger.warning("cosine of a zero vector; defined as 0")
        return 0.0
    return dot / (na * nb)


def overlap_matrix(candidates: Sequence[str], summaries: Sequence[str]) -> list[list[float]]:
    """``out[i][j]`` = TF-IDF cosine between candidate i and summary j."""
    if len(candidates) != len(summaries):
        raise ValueError("need one summary per candidate")
    if not candidates:
        return []
    table = fit_tfidf(list(candidates) + list(summaries))
    cand_vecs = [table.vector(c) for c in candidates]
    sum_vecs = [table.vector(s) for s in summaries]
    return [[cosine(cv, sv) for sv in sum_vecs] for cv in cand_vecs]


def passage_text(passage: Passage) -> str:
    return f"{passage.title} {passage.text}"


def rerank_passages(
    key_text: str, passages: Sequence[Passage], mode: str = "tfidf", embed_backend=None
) -> list[tuple[Passage, float]]:
    """Order passages by descending cosine to ``key_text``; ties by ascending id."""
    if not passages:
        raise ValueError("nothing to rerank")
    texts = [passage_text(p) for p in passages]
    if mode == "tfidf":
        table = fit_tfidf([key_text] + texts)
        key_vec = table.vector(key_text)
        scores = [cosine(key_vec, table.vector(t)) for t in texts]
    elif mode == "embedding":
        if embed_backend is None:
            raise ValueError("embedding mode needs an embedding backend")
        vectors = embed_backend.embed([key_text] + texts)
        if len(vectors) != len(texts) + 1:
            raise ValueError("embedding backend returned the wrong number of vectors")
        scores = [cosine(vectors[0], v) for v in vectors[1:]]
    else:
        raise ValueError(f"unknown rerank mode {mode!r}; expected one of {MODES}")
    order = sorted(range(len(passages)), key=lambda i: (-scores[i], passages[i].id))
    return [(passages[i], scores[i]) for i in order]


def key_from_trace(sure_trace: PredictionTrace | None, key: str, question: str) -> str | None:
    if key == "question":
        return question
    if key == "sure":
        if sure_trace is None or sure_trace.chosen_index is None:
            raise ValueError("key 'sure' needs a SuRe trace with a chosen candidate")
        if not sure_trace.summaries:
            # Collapsed candidate set: no summaries were written.
            return None
        return sure_trace.summaries[sure_trace.chosen_index]
    if key == "generic":
        if sure_trace is not None and sure_trace.method == "generic-sum" and sure_trace.summaries:
            return sure_trace.summaries[0]
        return None
    raise ValueError(f"unknown rerank key {key!r}; expected one of {KEYS}")


def top1_pipeline(
    question: str,
    index: InvertedIndex,
    corpus: Corpus,
    n: int,
    sure_trace: PredictionTrace | None,
    mode: str,
    backends,
    key: str = "sure",
    embed_backend=None,
    qid: str | None = None,
) -> PredictionTrace:
    """Keep the single passage most similar to the key text, then answer with it.

    ``key`` is the winning conditional summary ("sure"), a generic summary
    ("generic", taken from a generic-sum trace or generated here) or the
    question itself.
    """
    stage = _resolve(backends)
    trace = PredictionTrace(question=question, method=f"rerank-{key}-{mode}", id=qid, n=n)
    try:
        if sure_trace is not None and sure_trace.retrieved:
            passages = [corpus.get(pid) for pid in sure_trace.retrieved[:n]]
        else:
            passages = retrieve(index, corpus, question, n).passages
        trace.retrieved = [p.id for p in passages]
        if not passages:
            raise ValueError("no passages retrieved")
        key_text = key_from_trace(sure_trace, key, question)
        if key_text is None and key == "generic":
            prompt = prompts.render_generic_summary_prompt(question, passages)
            key_text = strip_done(_ask(stage["summarize"], prompt, "summarize", trace))
        if key_text is None:
            trace.notes.append("no summary available; kept retriever order")
            ranked = [(p, 0.0) for p in passages]
        else:
            trace.summaries = [key_text]
            ranked = rerank_passages(key_text, passages, mode, embed_backend)
        top = ranked[0][0]
        trace.extra["rerank_order"] = [p.id for p, _ in ranked]
        trace.extra["rerank_scores"] = [s for _, s in ranked]
        answer = _ask(stage["baseline"], prompts.render_base_prompt(question, [top]), "baseline", trace)
        trace.final_answer = answer.strip()
    except Exception as exc:
        raise PipelineError(f"rerank failed: {exc}", trace) from exc
    return trace


def summarize_overlap(matrices: Sequence[Sequence[Sequence[float]]]) -> dict:
    """Average K x K overlap across questions plus diagonal/off-diagonal means."""
    if not matrices:
        return {"count": 0, "mean_matrix": [], "diagonal_mean": None, "off_diagonal_mean": None}
    arr = np.asarray(matrices, dtype=float)
    mean = arr.mean(axis=0)
    k = mean.shape[0]
    diag = float(np.trace(mean) / k)
    off = float((mean.sum() - np.trace(mean)) / (k * k - k)) if k > 1 else None
    return {
        "count": int(arr.shape[0]),
        "mean_matrix": mean.tolist(),
        "diagonal_mean": diag,
        "off_diagonal_mean": off,
    }


def format_overlap_table(summary: dict) -> str:
    lines = [f"TF-IDF overlap over {summary['count']} question(s)"]
    mat = summary["mean_matrix"]
    if mat:
        k = len(mat)
        lines.append(" " * 12 + "".join(f"{'summary ' + str(j + 1):>12}" for j in range(k)))
        for i, row in enumerate(mat):
            lines.append(f"{'candidate ' + str(i + 1):<12}" + "".join(f"{v:12.4f}" for v in row))
        lines.append(f"diagonal mean {summary['diagonal_mean']:.4f}")
        if summary["off_diagonal_mean"] is not None:
            lines.append(f"off-diagonal mean {summary['off_diagonal_mean']:.4f}")
    return "\n".join(lines)
