"""QA datasets, SQuAD-style EM/F1, bootstrap intervals, and run reports."""

from __future__ import annotations

import json
import re
import string
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import CorpusError

_ARTICLES = re.compile(r"\b(a|an|the)\b")
_PUNCT = frozenset(string.punctuation)


@dataclass(frozen=True)
class QAExample:
    id: str
    question: str
    gold_answers: tuple[str, ...]

    def to_dict(self) -> dict:
        return {"id": self.id, "question": self.question, "answers": list(self.gold_answers)}


def load_dataset(path: str | Path) -> list[QAExample]:
    """Read ``{id?, question, answers}`` lines. Missing ids become ``q<line>``."""
    examples = []
    seen = set()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            question = rec.get("question")
            if not isinstance(question, str) or not question.strip():
                raise CorpusError(f"line {lineno}: missing question")
            answers = rec.get("answers")
            if isinstance(answers, str):
                answers = [answers]
            if not answers or not all(isinstance(a, str) for a in answers):
                raise CorpusError(f"line {lineno}: missing or empty answers")
            qid = str(rec["id"]) if rec.get("id") is not None else f"q{lineno}"
            if qid in seen:
                raise CorpusError(f"line {lineno}: duplicate id {qid}")
            seen.add(qid)
            examples.append(QAExample(qid, question, tuple(answers)))
    return examples


def write_dataset(examples: Iterable[QAExample], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps(ex.to_dict(), ensure_ascii=False) + "\n")


def subsample(examples: Sequence[QAExample], n: int, seed: int | np.random.Generator = 0) -> list[QAExample]:
    """Uniform sample of ``n`` examples without replacement, original order kept."""
    if n > len(examples):
        raise ValueError(f"cannot draw {n} examples from {len(examples)}")
    if n < 0:
        raise ValueError("n must be non-negative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    picked = np.sort(rng.choice(len(examples), size=n, replace=False))
    return [examples[i] for i in picked]


def normalize_answer(text: str) -> str:
    """Lowercase, drop punctuation and the articles a/an/the, squeeze spaces."""
    text = "".join(ch for ch in text.lower() if ch not in _PUNCT)
    text = _ARTICLES.sub(" ", text)
    return " ".join(text.split())


def exact_match(prediction: str, gold_answers: Sequence[str]) -> int:
    pred = normalize_answer(prediction)
    return int(any(pred == normalize_answer(g) for g in gold_answers))


def _f1_single(pred_tokens: list[str], gold_tokens: list[str]) -> float:
    if not pred_tokens or not gold_tokens:
        return float(pred_tokens == gold_tokens)
    common = Counter(pred_tokens) & Counter(gold_tokens)
    overlap = sum(common.values())
    if overlap == 0:
        return 0.0
    precision = overlap / len(pred_tokens)
    recall = overlap / len(gold_tokens)
    return 2 * precision * recall / (precision + recall)


def f1_score(prediction: str, gold_answers: Sequence[str]) -> float:
    pred_tokens = normalize_answer(prediction).split()
    return max(_f1_single(pred_tokens, normalize_answer(g).split()) for g in gold_answers)


def bootstrap_ci(
    values: Sequence[float],
    iterations: int = 1000,
    level: float = 0.95,
    seed: int | np.random.Generator = 0,
) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``values``."""
    arr = np.asarray(values, dtype=float)
    if arr.size == 0:
        raise ValueError("bootstrap_ci needs at least one value")
    if not 0 < level < 1:
        raise ValueError("level must be in (0, 1)")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    idx = rng.integers(0, arr.size, size=(iterations, arr.size))
    means = arr[idx].mean(axis=1)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(means, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


@dataclass
class MetricsReport:
    method: str
    ids: list[str]
    em: list[int]
    f1: list[float]
    em_mean: float
    f1_mean: float
    em_ci: tuple[float, float] | None = None
    f1_ci: tuple[float, float] | None = None
    metadata: dict = field(default_factory=dict)

    def summary_record(self) -> dict:
        return {
            "method": self.method,
            "count": len(self.ids),
            "em": self.em_mean,
            "f1": self.f1_mean,
            "em_ci": list(self.em_ci) if self.em_ci else None,
            "f1_ci": list(self.f1_ci) if self.f1_ci else None,
            **({"metadata": self.metadata} if self.metadata else {}),
        }

    def item_records(self) -> list[dict]:
        return [{"id": i, "em": e, "f1": f} for i, e, f in zip(self.ids, self.em, self.f1)]


def _mean(values: Sequence[float]) -> float:
    # Index-order summation keeps aggregates reproducible.
    total = 0.0
    for v in values:
        total += v
    return total / len(values) if values else 0.0


def read_traces(path: str | Path) -> list[dict]:
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if line.strip():
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"{path}:{lineno}: malformed trace line") from exc
    return records


def score_predictions(
    predictions: Sequence[tuple[str, str]],
    dataset: Sequence[QAExample],
    method: str = "",
    ci: bool = True,
    iterations: int = 1000,
    seed: int | np.random.Generator = 0,
) -> MetricsReport:
    """Score ``(id, prediction)`` pairs against ``dataset``; unknown ids raise."""
    by_id = {ex.id: ex for ex in dataset}
    unknown = [qid for qid, _ in predictions if qid not in by_id]
    if unknown:
        raise KeyError(f"prediction ids not in dataset: {unknown[:10]}")
    ids = [qid for qid, _ in predictions]
    em = [exact_match(pred or "", by_id[qid].gold_answers) for qid, pred in predictions]
    f1 = [f1_score(pred or "", by_id[qid].gold_answers) for qid, pred in predictions]
    report = MetricsReport(method, ids, em, f1, _mean(em), _mean(f1))
    if ci and ids:
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        report.em_ci = bootstrap_ci(em, iterations, 0.95, rng)
        report.f1_ci = bootstrap_ci(f1, iterations, 0.95, rng)
    return report


def evaluate_run(
    trace_file: str | Path,
    dataset: Sequence[QAExample] | str | Path,
    ci: bool = True,
    iterations: int = 1000,
    seed: int | np.random.Generator = 0,
) -> MetricsReport:
    if isinstance(dataset, (str, Path)):
        dataset = load_dataset(dataset)
    records = read_traces(trace_file)
    methods = sorted({r.get("method", "") for r in records})
    missing_id = [i for i, r in enumerate(records, start=1) if r.get("id") is None]
    if missing_id:
        raise KeyError(f"trace records without an id at lines {missing_id[:10]}")
    predictions = [(str(r["id"]), r.get("final_answer") or "") for r in records]
    report = score_predictions(predictions, dataset, "+".join(methods), ci, iterations, seed)
    report.metadata["trace_file"] = str(trace_file)
    return report


def format_report(reports: Sequence[MetricsReport]) -> str:
    """Plain-text table, EM / F1 in percent, CIs on the line below."""
    width = max([len("Method")] + [len(r.method) for r in reports])
    lines = [f"{'Method':<{width}} | {'N':>5} | {'EM':>6} | {'F1':>6}", "-" * (width + 27)]
    for r in reports:
        lines.append(f"{r.method:<{width}} | {len(r.ids):>5} | {100 * r.em_mean:6.1f} | {100 * r.f1_mean:6.1f}")
        if r.em_ci and r.f1_ci:
            em_ci = f"[{100 * r.em_ci[0]:.1f}, {100 * r.em_ci[1]:.1f}]"
            f1_ci = f"[{100 * r.f1_ci[0]:.1f}, {100 * r.f1_ci[1]:.1f}]"
            lines.append(f"{'':<{width}} | {'':>5} | {em_ci} | {f1_ci}")
    return "\n".join(lines)
