"""SuRe pipeline: candidates, conditional summaries, verification, selection.

Also holds the prompting baselines that share its plumbing (base,
no-retrieval, generic summary then predict, multiple-choice).
"""

from __future__ import annotations

import json
import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Mapping, Sequence

from . import prompts
from .backend import STAGES, ChatRequest
from .bm25 import InvertedIndex, RetrievedSet, retrieve
from .corpus import Corpus, Passage
from .errors import PipelineError, SureError
from .prompts import PairChoice

logger = logging.getLogger(__name__)

DEFAULT_N = 10
DEFAULT_K = 2
DONE_MARKER = "[DONE]"


# -- data ------------------------------------------------------------------


@dataclass
class CandidateSet:
    question: str
    candidates: list[str]
    raw_response: str

    def __len__(self) -> int:
        return len(self.candidates)


@dataclass
class ConditionalSummary:
    candidate_index: int
    text: str


@dataclass
class RankResult:
    rank: list[float]
    r_pair: list[list[float | None]]
    votes: list[dict]


@dataclass
class VerificationScores:
    validity: list[int]
    rank: list[float]
    r_pair: list[list[float | None]]
    pair_votes: list[dict]

    @property
    def plausibility(self) -> list[float]:
        return [v + r for v, r in zip(self.validity, self.rank)]


@dataclass
class CallRecord:
    stage: str
    backend: str
    model: str
    digest: str
    prompt: str
    response: str


@dataclass
class PredictionTrace:
    question: str
    method: str
    id: str | None = None
    n: int | None = None
    k: int | None = None
    retrieved: list[str] = field(default_factory=list)
    retrieval_scores: list[float] = field(default_factory=list)
    candidates: list[str] = field(default_factory=list)
    candidate_response: str | None = None
    summaries: list[str] = field(default_factory=list)
    validity: list[int] = field(default_factory=list)
    rank: list[float] = field(default_factory=list)
    r_pair: list[list[float | None]] = field(default_factory=list)
    pair_votes: list[dict] = field(default_factory=list)
    scores: list[float] = field(default_factory=list)
    chosen_index: int | None = None
    final_answer: str | None = None
    stage_backends: dict[str, str] = field(default_factory=dict)
    calls: list[CallRecord] = field(default_factory=list)
    notes: list[str] = field(default_factory=list)
    extra: dict = field(default_factory=dict)

    def record(self, stage: str, backend, request: ChatRequest, response: str) -> None:
        name = getattr(backend, "name", type(backend).__name__)
        self.stage_backends.setdefault(stage, name)
        self.calls.append(
            CallRecord(stage, name, request.model, request.digest, request.prompt_echo, response)
        )

    @property
    def call_count(self) -> int:
        return len(self.calls)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, sort_keys=True)

    @classmethod
    def from_dict(cls, data: Mapping) -> "PredictionTrace":
        data = dict(data)
        data["calls"] = [CallRecord(**c) for c in data.get("calls", [])]
        return cls(**data)


def expected_sure_calls(num_candidates: int) -> int:
    """Backend calls made by :func:`run_sure` for a given candidate count."""
    if num_candidates < 2:
        return 1
    k = num_candidates
    return 1 + k + k + 2 * (k * (k - 1) // 2)


# -- backend plumbing ------------------------------------------------------


def _passages(retrieved) -> list[Passage]:
    if isinstance(retrieved, RetrievedSet):
        return retrieved.passages
    return list(retrieved)


def _request(backend, prompt: str) -> ChatRequest:
    return ChatRequest.user(backend.model, prompt, 0.0, getattr(backend, "max_tokens", None))


def _ask(backend, prompt: str, stage: str, trace: PredictionTrace | None) -> str:
    request = _request(backend, prompt)
    response = backend.complete(request)
    if trace is not None:
        trace.record(stage, backend, request, response)
    return response


def _ask_all(backend, prompts_: Sequence[str], stage: str, trace, max_workers: int = 1) -> list[str]:
    """Issue several prompts, possibly concurrently; record calls in input order."""
    requests = [_request(backend, p) for p in prompts_]
    if max_workers > 1 and len(requests) > 1:
        with ThreadPoolExecutor(max_workers=max_workers) as pool:
            futures = [pool.submit(backend.complete, r) for r in requests]
            results = []
            for request, future in zip(requests, futures):
                try:
                    response = future.result()
                except BaseException:
                    for f in futures:
                        f.cancel()
                    raise
                results.append(response)
                if trace is not None:
                    trace.record(stage, backend, request, response)
            return results
    results = []
    for request in requests:
        response = backend.complete(request)
        results.append(response)
        if trace is not None:
            trace.record(stage, backend, request, response)
    return results


def _resolve(backends) -> dict:
    if isinstance(backends, Mapping):
        missing = [s for s in STAGES if s not in backends]
        if missing:
            raise SureError(f"no backend for stage(s) {missing}")
        return dict(backends)
    return {stage: backends for stage in STAGES}


# -- stages ----------------------------------------------------------------


def generate_candidates(
    question: str,
    retrieved,
    k: int,
    backend,
    shots: Sequence[tuple[str, str]] | None = None,
    trace: PredictionTrace | None = None,
) -> CandidateSet:
    passages = _passages(retrieved)
    if shots:
        prompt = prompts.render_candidate_prompt_fewshot(question, passages, shots, k)
    else:
        prompt = prompts.render_candidate_prompt(question, passages, k)
    raw = _ask(backend, prompt, "candidates", trace)
    if trace is not None:
        trace.candidate_response = raw
    parsed = prompts.parse_candidates(raw, k)
    return CandidateSet(question, parsed.candidates, raw)


def strip_done(text: str) -> str:
    text = (text or "").strip()
    if text.endswith(DONE_MARKER):
        text = text[: -len(DONE_MARKER)].rstrip()
    return text


def summarize_conditional(
    question: str, retrieved, candidates: Sequence[str], k: int, backend, trace=None
) -> ConditionalSummary:
    if not 0 <= k < len(candidates):
        raise IndexError(f"candidate index {k} out of range for {len(candidates)} candidates")
    prompt = prompts.render_summarization_prompt(question, _passages(retrieved), candidates, k)
    return ConditionalSummary(k, strip_done(_ask(backend, prompt, "summarize", trace)))


def summarize_all(question, retrieved, candidates, backend, trace=None, max_workers=1) -> list[ConditionalSummary]:
    passages = _passages(retrieved)
    prompt_list = [
        prompts.render_summarization_prompt(question, passages, candidates, k) for k in range(len(candidates))
    ]
    responses = _ask_all(backend, prompt_list, "summarize", trace, max_workers)
    return [ConditionalSummary(k, strip_done(r)) for k, r in enumerate(responses)]


def validity_from_response(response: str) -> int:
    # Anything other than an explicit "true" falls into the else branch.
    return 1 if prompts.parse_bool(response) is True else 0


def check_validity(question: str, candidate: str, summary: str, backend, trace=None) -> int:
    prompt = prompts.render_validity_prompt(question, candidate, summary)
    return validity_from_response(_ask(backend, prompt, "validity", trace))


def aggregate_pair_votes(k: int, outcomes: Mapping[tuple[int, int], PairChoice]):
    """Fold directed ranking outcomes into pair scores and per-candidate ranks.

    ``outcomes[(a, b)]`` is the parsed answer when summary ``a`` was shown as
    Passage 1 and ``b`` as Passage 2. Each query hands out one unit: 1/0 to the
    chosen/other summary, 0.5/0.5 when neither was chosen. The pair score of
    ``a`` against ``b`` is the mean of ``a``'s awards over both orders, so
    ``r_pair[a][b] + r_pair[b][a] == 1`` and the ranks sum to K(K-1)/2.
    """
    award = [[0.0] * k for _ in range(k)]
    for a, b in combinations(range(k), 2):
        for first, second in ((a, b), (b, a)):
            choice = PairChoice(outcomes[(first, second)])
            if choice is PairChoice.FIRST:
                award[first][second] += 1.0
            elif choice is PairChoice.SECOND:
                award[second][first] += 1.0
            else:
                award[first][second] += 0.5
                award[second][first] += 0.5
    r_pair: list[list[float | None]] = [
        [None if a == b else award[a][b] / 2.0 for b in range(k)] for a in range(k)
    ]
    rank = [sum(v for v in row if v is not None) for row in r_pair]
    return rank, r_pair


def rank_pairwise(question: str, summaries: Sequence[str], backend, trace=None, max_workers: int = 1) -> RankResult:
    """Pair-wise ranking with every pair asked in both orders."""
    k = len(summaries)
    if k < 2:
        raise ValueError("pair-wise ranking needs at least two summaries")
    order = []
    for a, b in combinations(range(k), 2):
        order.extend([(a, b), (b, a)])
    prompt_list = [prompts.render_ranking_prompt(question, summaries[a], summaries[b]) for a, b in order]
    responses = _ask_all(backend, prompt_list, "ranking", trace, max_workers)
    outcomes = {}
    votes = []
    for (a, b), response in zip(order, responses):
        choice = prompts.parse_passage_choice(response)
        outcomes[(a, b)] = choice
        votes.append({"first": a, "second": b, "choice": choice.value})
    rank, r_pair = aggregate_pair_votes(k, outcomes)
    return RankResult(rank, r_pair, votes)


def select_answer(candidates: Sequence[str], validity: Sequence[int], rank: Sequence[float]) -> tuple[int, str]:
    """Argmax of validity + rank; ties go to the earliest generated candidate."""
    if not candidates:
        raise ValueError("no candidates to select from")
    if not len(candidates) == len(validity) == len(rank):
        raise ValueError("candidates, validity and rank must be aligned")
    scores = [v + r for v, r in zip(validity, rank)]
    best = max(range(len(scores)), key=lambda i: (scores[i], -i))
    return best, candidates[best]


# -- full methods ----------------------------------------------------------


def _retrieve_into(trace: PredictionTrace, index, corpus, question, n) -> RetrievedSet:
    retrieved = retrieve(index, corpus, question, n)
    trace.retrieved = retrieved.ids
    trace.retrieval_scores = [s for _, s in retrieved.entries]
    return retrieved


def run_sure(
    question: str,
    index: InvertedIndex,
    corpus: Corpus,
    n: int = DEFAULT_N,
    k: int = DEFAULT_K,
    backends=None,
    shots: Sequence[tuple[str, str]] | None = None,
    qid: str | None = None,
    max_workers: int = 1,
    retrieved: RetrievedSet | Sequence[Passage] | None = None,
) -> PredictionTrace:
    """Retrieve, generate candidates, summarize per candidate, verify, select.

    If de-duplication leaves a single candidate, verification is skipped and
    that candidate is returned. Any failure raises :class:`PipelineError`
    carrying the partial trace.
    """
    if k < 2:
        raise ValueError("SuRe needs K >= 2")
    stage = _resolve(backends)
    trace = PredictionTrace(question=question, method="sure", id=qid, n=n, k=k)
    try:
        if retrieved is None:
            retrieved = _retrieve_into(trace, index, corpus, question, n)
        else:
            trace.retrieved = [p.id for p in _passages(retrieved)]
        cands = generate_candidates(question, retrieved, k, stage["candidates"], shots, trace)
        trace.candidates = cands.candidates
        if len(cands) == 1:
            trace.notes.append("candidate set collapsed to one; verification skipped")
            trace.chosen_index, trace.final_answer = 0, cands.candidates[0]
            return trace

        summaries = summarize_all(question, retrieved, cands.candidates, stage["summarize"], trace, max_workers)
        trace.summaries = [s.text for s in summaries]

        validity_prompts = [
            prompts.render_validity_prompt(question, c, s) for c, s in zip(cands.candidates, trace.summaries)
        ]
        responses = _ask_all(stage["validity"], validity_prompts, "validity", trace, max_workers)
        trace.validity = [validity_from_response(r) for r in responses]

        ranked = rank_pairwise(question, trace.summaries, stage["ranking"], trace, max_workers)
        trace.rank, trace.r_pair, trace.pair_votes = ranked.rank, ranked.r_pair, ranked.votes

        trace.scores = [v + r for v, r in zip(trace.validity, trace.rank)]
        trace.chosen_index, trace.final_answer = select_answer(trace.candidates, trace.validity, trace.rank)
    except Exception as exc:
        raise PipelineError(f"sure failed: {exc}", trace) from exc
    return trace


def run_base(question, index, corpus, n, backend, shots=None, qid=None) -> PredictionTrace:
    """Retrieved passages appended to the prompt; the answer is the trimmed reply."""
    trace = PredictionTrace(question=question, method="base", id=qid, n=n)
    try:
        retrieved = _retrieve_into(trace, index, corpus, question, n) if n > 0 else []
        passages = _passages(retrieved)
        if shots:
            prompt = prompts.render_base_prompt_fewshot(question, passages, shots)
        else:
            prompt = prompts.render_base_prompt(question, passages)
        trace.final_answer = _ask(backend, prompt, "baseline", trace).strip()
    except Exception as exc:
        raise PipelineError(f"base failed: {exc}", trace) from exc
    return trace


def run_no_retrieval(question, backend, shots=None, qid=None) -> PredictionTrace:
    trace = run_base(question, None, None, 0, backend, shots, qid)
    trace.method = "no-retrieval"
    return trace


SUMMARY_TITLE = "Summary"


def run_generic_sum(question, index, corpus, n, backends, qid=None) -> PredictionTrace:
    """Generic summary of the passages, then the base prompt over that summary."""
    stage = _resolve(backends)
    trace = PredictionTrace(question=question, method="generic-sum", id=qid, n=n)
    try:
        retrieved = _retrieve_into(trace, index, corpus, question, n)
        prompt = prompts.render_generic_summary_prompt(question, retrieved.passages)
        summary = strip_done(_ask(stage["summarize"], prompt, "summarize", trace))
        trace.summaries = [summary]
        pseudo = Passage("summary", SUMMARY_TITLE, summary)
        answer = _ask(stage["baseline"], prompts.render_base_prompt(question, [pseudo]), "baseline", trace)
        trace.final_answer = answer.strip()
    except Exception as exc:
        raise PipelineError(f"generic-sum failed: {exc}", trace) from exc
    return trace


_MCQ_LABEL = re.compile(r"^\(([A-Za-z])\)\s*(.*)$", re.DOTALL)


def map_mcq_answer(response: str, candidates: Sequence[str]) -> tuple[str, str | None]:
    """Map an MCQ reply to candidate text; returns (answer, warning or None)."""
    text = response.strip()
    m = _MCQ_LABEL.match(text)
    if m is None:
        return text, None
    idx = ord(m.group(1).lower()) - ord("a")
    if 0 <= idx < len(candidates):
        return candidates[idx], None
    return text, f"MCQ label {m.group(1)!r} outside the {len(candidates)} choices; raw answer kept"


def run_mcq(question, index, corpus, n, k, backends, shots=None, qid=None) -> PredictionTrace:
    """Same candidates as SuRe, offered back as multiple-choice options."""
    stage = _resolve(backends)
    trace = PredictionTrace(question=question, method="mcq", id=qid, n=n, k=k)
    try:
        retrieved = _retrieve_into(trace, index, corpus, question, n)
        cands = generate_candidates(question, retrieved, k, stage["candidates"], shots, trace)
        trace.candidates = cands.candidates
        prompt = prompts.render_mcq_prompt(question, retrieved.passages, cands.candidates)
        response = _ask(stage["baseline"], prompt, "baseline", trace)
        trace.final_answer, warning = map_mcq_answer(response, cands.candidates)
        if warning:
            logger.warning("%s: %s", qid or question, warning)
            trace.notes.append(warning)
        if trace.final_answer in cands.candidates:
            trace.chosen_index = cands.candidates.index(trace.final_answer)
    except Exception as exc:
        raise PipelineError(f"mcq failed: {exc}", trace) from exc
    return trace


METHODS = ("sure", "base", "no-retrieval", "generic-sum", "mcq")
