"""Passage corpus: ingestion from JSONL, lookup by id, and the shared tokenizer."""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

from .errors import CorpusError

_NON_ALNUM = re.compile(r"[\W_]+")


def tokenize(text: str) -> list[str]:
    """Lowercase ``text`` and split on every non-alphanumeric character.

    No stemming and no stopword removal; empty fragments are dropped.
    Alphanumeric follows Unicode (``str.isalnum``), so "Café" stays one token.
    """
    return [tok for tok in _NON_ALNUM.split(text.lower()) if tok]


@dataclass(frozen=True)
class Passage:
    id: str
    title: str
    text: str

    def to_dict(self) -> dict:
        return {"id": self.id, "title": self.title, "text": self.text}


@dataclass(frozen=True)
class Corpus:
    """Immutable, ordered collection of passages with an id index."""

    passages: tuple[Passage, ...] = ()
    by_id: dict[str, int] = field(default_factory=dict, compare=False, repr=False)

    def __post_init__(self):
        if not self.by_id and self.passages:
            index = {}
            for pos, passage in enumerate(self.passages):
                if not passage.id:
                    raise CorpusError(f"empty passage id at position {pos}")
                if passage.id in index:
                    raise CorpusError(f"duplicate id {passage.id}")
                index[passage.id] = pos
            object.__setattr__(self, "by_id", index)

    @classmethod
    def from_passages(cls, passages: Iterable[Passage]) -> "Corpus":
        return cls(tuple(passages))

    def __len__(self) -> int:
        return len(self.passages)

    def __iter__(self) -> Iterator[Passage]:
        return iter(self.passages)

    def __getitem__(self, pos: int) -> Passage:
        return self.passages[pos]

    def get(self, passage_id: str) -> Passage:
        try:
            return self.passages[self.by_id[passage_id]]
        except KeyError:
            raise KeyError(f"unknown passage id {passage_id!r}") from None

    def position(self, passage_id: str) -> int:
        return self.by_id[passage_id]


def _require_str(record: dict, key: str, lineno: int) -> str:
    if key not in record:
        raise CorpusError(f"line {lineno}: missing field {key!r}")
    value = record[key]
    if not isinstance(value, str):
        raise CorpusError(f"line {lineno}: field {key!r} must be a string")
    return value


def ingest_jsonl(path: str | Path) -> Corpus:
    """Read a corpus file with one ``{"id", "title", "text"}`` object per line.

    Blank lines are skipped. Unknown keys are ignored. Raises
    :class:`CorpusError` naming the offending line for malformed JSON,
    missing fields, empty ids and duplicate ids.
    """
    passages = []
    seen: dict[str, int] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"line {lineno}: malformed JSON ({exc.msg})") from exc
            if not isinstance(record, dict):
                raise CorpusError(f"line {lineno}: expected a JSON object")
            pid = record.get("id")
            if isinstance(pid, int) and not isinstance(pid, bool):
                pid = str(pid)
                record["id"] = pid
            pid = _require_str(record, "id", lineno)
            if not pid:
                raise CorpusError(f"line {lineno}: empty id")
            if pid in seen:
                raise CorpusError(f"duplicate id {pid} at line {lineno}")
            seen[pid] = len(passages)
            passages.append(
                Passage(pid, _require_str(record, "title", lineno), _require_str(record, "text", lineno))
            )
    return Corpus(tuple(passages), seen)


def write_jsonl(corpus: Iterable[Passage], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for passage in corpus:
            fh.write(json.dumps(passage.to_dict(), ensure_ascii=False) + "\n")
