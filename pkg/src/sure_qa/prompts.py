"""Prompt templates and the parsers that read structure back out of responses.

Templates live in ``templates/*.txt`` as UTF-8 text with ``{{slot}}`` markers
and can be overridden by pointing :func:`load_template` at another directory.
Rendering is a single pass, so slot values are never re-expanded.
"""

from __future__ import annotations

import re
import string
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

from .corpus import Passage
from .errors import ParseError

_SLOT = re.compile(r"\{\{(\w+)\}\}")

NUMBER_WORDS = {
    1: "one", 2: "two", 3: "three", 4: "four", 5: "five",
    6: "six", 7: "seven", 8: "eight", 9: "nine", 10: "ten",
}
_PLACEHOLDERS = ("xx", "yy", "zz", "ww", "vv", "uu", "tt", "ss", "rr", "qq")


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str

    @property
    def slots(self) -> list[str]:
        return list(dict.fromkeys(_SLOT.findall(self.body)))

    def render(self, **values: str) -> str:
        missing = [s for s in self.slots if s not in values]
        if missing:
            raise KeyError(f"template {self.name!r} missing slot(s): {missing}")
        return _SLOT.sub(lambda m: values[m.group(1)], self.body)


_template_dir: Path | None = None


def set_template_dir(directory: str | Path | None) -> None:
    """Use templates from ``directory`` instead of the shipped defaults."""
    global _template_dir
    _template_dir = Path(directory) if directory is not None else None
    load_template.cache_clear()


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    if _template_dir is not None and (_template_dir / f"{name}.txt").exists():
        body = (_template_dir / f"{name}.txt").read_text(encoding="utf-8")
    else:
        body = resources.files("sure_qa").joinpath("templates", f"{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name, body)


# -- slot formatting -------------------------------------------------------


def label(i: int) -> str:
    return f"({string.ascii_lowercase[i]})"


def format_passages(passages: Sequence[Passage]) -> str:
    blocks = [
        f"Passage #{i} Title: {p.title}\nPassage #{i} Text: {p.text}\n\n"
        for i, p in enumerate(passages, start=1)
    ]
    return "".join(blocks)


def format_choices(choices: Sequence[str]) -> str:
    return " ".join(f"{label(i)} {c}" for i, c in enumerate(choices))


def format_shots(shots: Sequence[tuple[str, str]]) -> str:
    return "".join(f"Question: {q}\nAnswer: {a}\n\n" for q, a in shots)


def k_slots(k: int) -> dict[str, str]:
    if k < 1 or k > len(_PLACEHOLDERS):
        raise ValueError(f"K must be in [1, {len(_PLACEHOLDERS)}], got {k}")
    return {
        "k_word": NUMBER_WORDS.get(k, str(k)),
        "k_format": ", ".join(f"{label(i)} {_PLACEHOLDERS[i]}" for i in range(k)),
    }


# -- renderers -------------------------------------------------------------


def render_candidate_prompt(question: str, passages: Sequence[Passage], k: int = 2) -> str:
    return load_template("candidates").render(
        n=str(len(passages)), passages=format_passages(passages), question=question, **k_slots(k)
    )


def render_candidate_prompt_fewshot(
    question: str, passages: Sequence[Passage], shots: Sequence[tuple[str, str]], k: int = 2
) -> str:
    if not shots:
        raise ValueError("few-shot prompt needs at least one shot; use render_candidate_prompt")
    return load_template("candidates_fewshot").render(
        n=str(len(passages)),
        passages=format_passages(passages),
        shots=format_shots(shots),
        question=question,
        **k_slots(k),
    )


def render_summarization_prompt(
    question: str, passages: Sequence[Passage], choices: Sequence[str], prediction: str | int
) -> str:
    """Candidate-conditioned summary prompt.

    ``prediction`` is either the candidate text or its index in ``choices``.
    """
    if isinstance(prediction, int):
        if not 0 <= prediction < len(choices):
            raise ValueError(f"prediction index {prediction} out of range")
        idx = prediction
    else:
        try:
            idx = list(choices).index(prediction)
        except ValueError:
            raise ValueError(f"prediction {prediction!r} is not one of the choices") from None
    return load_template("summarize").render(
        passages=format_passages(passages),
        question=question,
        choices=format_choices(choices),
        prediction=f"{label(idx)} {choices[idx]}",
    )


def render_validity_prompt(question: str, prediction: str, summary: str) -> str:
    return load_template("validity").render(question=question, prediction=prediction, summary=summary)


def render_ranking_prompt(question: str, summary_a: str, summary_b: str) -> str:
    return load_template("ranking").render(question=question, passage_1=summary_a, passage_2=summary_b)


def render_base_prompt(question: str, passages: Sequence[Passage] = ()) -> str:
    return load_template("base").render(passages=format_passages(passages), question=question)


def render_base_prompt_fewshot(
    question: str, passages: Sequence[Passage], shots: Sequence[tuple[str, str]]
) -> str:
    if not shots:
        raise ValueError("few-shot prompt needs at least one shot; use render_base_prompt")
    return load_template("base_fewshot").render(
        passages=format_passages(passages), shots=format_shots(shots), question=question
    )


def render_generic_summary_prompt(question: str, passages: Sequence[Passage]) -> str:
    return load_template("generic_summary").render(passages=format_passages(passages), question=question)


def render_mcq_prompt(question: str, passages: Sequence[Passage], choices: Sequence[str]) -> str:
    if not choices:
        raise ValueError("MCQ prompt needs at least one choice")
    return load_template("mcq").render(
        passages=format_passages(passages), question=question, choices=format_choices(choices)
    )


# -- parsers ---------------------------------------------------------------

_LABEL = re.compile(r"\(([A-Za-z])\)")
_STRIP = " \t\r\n,.;:!?\"'`*"
_ANSWER_PREFIX = re.compile(r"^\s*answers?\s*:\s*", re.IGNORECASE)


@dataclass(frozen=True)
class ParsedCandidates:
    candidates: list[str]
    raw: str


def _clean(text: str) -> str:
    return text.strip(_STRIP)


def parse_candidates(text: str, k: int = 2) -> ParsedCandidates:
    """Extract ``(a) x, (b) y`` style candidates from a model response.

    Labels are accepted only in sequence (a), (b), (c), ... so stray
    parentheticals such as "(s)" in an answer do not split it. Candidates are
    de-duplicated case-insensitively (first occurrence wins) and truncated to
    ``k``. With no labels, the whole response minus a leading "Answer:" is
    taken as a single candidate.
    """
    if not text or not text.strip():
        raise ParseError("empty candidate response")
    spans = []
    expected = 0
    for m in _LABEL.finditer(text):
        if m.group(1).lower() == string.ascii_lowercase[expected]:
            spans.append((m.start(), m.end()))
            expected += 1
            if expected == len(string.ascii_lowercase):
                break
    if spans:
        pieces = []
        for i, (_, end) in enumerate(spans):
            stop = spans[i + 1][0] if i + 1 < len(spans) else len(text)
            pieces.append(_clean(text[end:stop]))
    else:
        pieces = [_clean(_ANSWER_PREFIX.sub("", text.strip(), count=1))]

    candidates: list[str] = []
    seen = set()
    for piece in pieces:
        key = piece.casefold()
        if piece and key not in seen:
            seen.add(key)
            candidates.append(piece)
    if not candidates:
        raise ParseError(f"no candidates found in response {text!r}")
    return ParsedCandidates(candidates[:k], text)


_BOOL = re.compile(r"\b(true|false)\b", re.IGNORECASE)


def parse_bool(text: str) -> bool | None:
    """First standalone "true"/"false" (any case); ``None`` if neither occurs."""
    m = _BOOL.search(text or "")
    if m is None:
        return None
    return m.group(1).lower() == "true"


class PairChoice(str, Enum):
    FIRST = "first"
    SECOND = "second"
    NEITHER = "neither"


_PASSAGE_CHOICE = re.compile(r"\bpassage\s*([12])\b", re.IGNORECASE)


def parse_passage_choice(text: str) -> PairChoice:
    m = _PASSAGE_CHOICE.search(text or "")
    if m is None:
        return PairChoice.NEITHER
    return PairChoice.FIRST if m.group(1) == "1" else PairChoice.SECOND
