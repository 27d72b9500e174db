"""Okapi BM25 over an in-memory inverted index."""

from __future__ import annotations

import bisect
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import Corpus, Passage, tokenize
from .errors import CorpusError

INDEX_FORMAT = "sure-qa-bm25"
INDEX_VERSION = 1


@dataclass(frozen=True)
class InvertedIndex:
    postings: dict[str, list[tuple[int, int]]]
    doc_len: list[int]
    doc_ids: list[str]
    k1: float = 1.2
    b: float = 0.75
    avg_doc_len: float = field(init=False)

    def __post_init__(self):
        if self.k1 <= 0:
            raise ValueError(f"k1 must be > 0, got {self.k1}")
        if not 0.0 <= self.b <= 1.0:
            raise ValueError(f"b must be in [0, 1], got {self.b}")
        if len(self.doc_len) != len(self.doc_ids):
            raise ValueError("doc_len and doc_ids must be aligned")
        n = len(self.doc_len)
        object.__setattr__(self, "avg_doc_len", sum(self.doc_len) / n if n else 0.0)

    @property
    def doc_count(self) -> int:
        return len(self.doc_len)

    def df(self, term: str) -> int:
        return len(self.postings.get(term, ()))

    def idf(self, term: str) -> float:
        df = self.df(term)
        return math.log((self.doc_count - df + 0.5) / (df + 0.5) + 1.0)

    def tf(self, term: str, position: int) -> int:
        plist = self.postings.get(term)
        if not plist:
            return 0
        i = bisect.bisect_left(plist, (position, 0))
        if i < len(plist) and plist[i][0] == position:
            return plist[i][1]
        return 0

    def _term_weight(self, tf: int, position: int) -> float:
        norm = 1.0 - self.b + self.b * self.doc_len[position] / self.avg_doc_len
        return tf * (self.k1 + 1.0) / (tf + self.k1 * norm)

    # -- persistence -------------------------------------------------------

    def dumps(self) -> str:
        payload = {
            "format": INDEX_FORMAT,
            "version": INDEX_VERSION,
            "k1": self.k1,
            "b": self.b,
            "doc_ids": self.doc_ids,
            "doc_len": self.doc_len,
            "postings": {t: [list(p) for p in plist] for t, plist in self.postings.items()},
        }
        return json.dumps(payload, sort_keys=True, ensure_ascii=False, separators=(",", ":"))

    @classmethod
    def loads(cls, data: str) -> "InvertedIndex":
        payload = json.loads(data)
        if payload.get("format") != INDEX_FORMAT:
            raise ValueError("not a sure-qa BM25 index file")
        if payload.get("version") != INDEX_VERSION:
            raise ValueError(f"unsupported index version {payload.get('version')}")
        postings = {t: [(int(p), int(f)) for p, f in plist] for t, plist in payload["postings"].items()}
        return cls(postings, list(payload["doc_len"]), list(payload["doc_ids"]), payload["k1"], payload["b"])

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "InvertedIndex":
        return cls.loads(Path(path).read_text(encoding="utf-8"))

    def check_corpus(self, corpus: Corpus) -> None:
        """Raise if ``corpus`` is not the corpus this index was built from."""
        if [p.id for p in corpus] != self.doc_ids:
            raise CorpusError("index does not match corpus (passage ids differ)")


def passage_tokens(passage: Passage) -> list[str]:
    # Title is indexed alongside the body, as in DPR-style Wikipedia passages.
    return tokenize(passage.title) + tokenize(passage.text)


def build_index(corpus: Corpus, k1: float = 1.2, b: float = 0.75) -> InvertedIndex:
    if len(corpus) == 0:
        raise CorpusError("cannot index an empty corpus")
    postings: dict[str, list[tuple[int, int]]] = {}
    doc_len = []
    for pos, passage in enumerate(corpus):
        tokens = passage_tokens(passage)
        doc_len.append(len(tokens))
        for term, tf in Counter(tokens).items():
            postings.setdefault(term, []).append((pos, tf))
    postings = {t: postings[t] for t in sorted(postings)}
    return InvertedIndex(postings, doc_len, [p.id for p in corpus], k1, b)


def bm25_score(index: InvertedIndex, query_tokens: list[str], position: int) -> float:
    """BM25 score of one passage. Repeated query tokens contribute repeatedly."""
    if not 0 <= position < index.doc_count:
        raise IndexError(f"passage position {position} out of range")
    parts = []
    for term in query_tokens:
        tf = index.tf(term, position)
        if tf:
            parts.append(index.idf(term) * index._term_weight(tf, position))
    return math.fsum(parts)


@dataclass
class RetrievedSet:
    question: str
    entries: list[tuple[Passage, float]]
    n: int

    @property
    def passages(self) -> list[Passage]:
        return [p for p, _ in self.entries]

    @property
    def ids(self) -> list[str]:
        return [p.id for p, _ in self.entries]

    def __len__(self) -> int:
        return len(self.entries)


def score_all(index: InvertedIndex, query_tokens: list[str]) -> dict[int, float]:
    """Term-at-a-time accumulation; only passages with a matching term appear.

    Contributions are summed with ``math.fsum`` so that mathematically tied
    passages get bitwise-equal scores regardless of term order.
    """
    acc: dict[int, list[float]] = {}
    for term in query_tokens:
        plist = index.postings.get(term)
        if not plist:
            continue
        idf = index.idf(term)
        for pos, tf in plist:
            acc.setdefault(pos, []).append(idf * index._term_weight(tf, pos))
    return {pos: math.fsum(parts) for pos, parts in acc.items()}


def retrieve(
    index: InvertedIndex, corpus: Corpus, question: str, n: int, pad: bool = False
) -> RetrievedSet:
    """Top-``n`` passages for ``question``, best first, ties by ascending id.

    Only positive-score passages are returned unless ``pad`` is set, in which
    case zero-score passages (ascending id) fill the list up to ``n``.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    scores = score_all(index, tokenize(question))
    ranked = sorted(
        ((pos, s) for pos, s in scores.items() if s > 0.0),
        key=lambda item: (-item[1], index.doc_ids[item[0]]),
    )[:n]
    entries = [(corpus[pos], s) for pos, s in ranked]
    if pad and len(entries) < n:
        taken = {pos for pos, _ in ranked}
        rest = sorted((pid, pos) for pos, pid in enumerate(index.doc_ids) if pos not in taken)
        entries.extend((corpus[pos], 0.0) for _, pos in rest[: n - len(entries)])
    return RetrievedSet(question, entries, n)
