"""BM25 retrieval over the corpus.

Tokenization mixes CJK character n-grams with latin words: every maximal CJK
run yields its unigrams in order followed by its adjacent bigrams, every
non-CJK stretch yields lowercased [a-z0-9]+ words. Scoring uses the
non-negative smoothed idf ln(1 + (N - df + 0.5) / (df + 0.5)) with k1 = 1.2
and b = 0.75 by default.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter, defaultdict
from dataclasses import dataclass
from pathlib import Path

from tcmeval.corpus import Corpus, DrugRecord

DEFAULT_K1 = 1.2
DEFAULT_B = 0.75
DEFAULT_TOP_K = 10

# Unified ideographs plus extension A and the compatibility block.
_CJK_RANGES = ((0x3400, 0x4DBF), (0x4E00, 0x9FFF), (0xF900, 0xFAFF))

_WORD = re.compile(r"[a-z0-9]+")


def _is_cjk(ch: str) -> bool:
    code = ord(ch)
    return any(lo <= code <= hi for lo, hi in _CJK_RANGES)


def tokenize(text: str) -> list[str]:
    """Unigram+bigram tokens for CJK runs, lowercase words elsewhere."""
    tokens: list[str] = []
    cjk: list[str] = []
    other: list[str] = []

    def flush_cjk() -> None:
        if cjk:
            tokens.extend(cjk)
            tokens.extend(a + b for a, b in zip(cjk, cjk[1:]))
            cjk.clear()

    def flush_other() -> None:
        if other:
            tokens.extend(_WORD.findall("".join(other).lower()))
            other.clear()

    for ch in text:
        if _is_cjk(ch):
            flush_other()
            cjk.append(ch)
        else:
            flush_cjk()
            other.append(ch)
    flush_cjk()
    flush_other()
    return tokens


@dataclass(frozen=True)
class RetrievedEntry:
    doc_id: int
    drug_name: str
    score: float
    rendered_text: str


def render_entry(record: DrugRecord) -> str:
    """Context block for one record: name, ingredient line, optional text."""
    lines = [record.name, "成分：" + "、".join(record.display_ingredients())]
    if record.source_text:
        lines.append(record.source_text)
    return "\n".join(lines)


class Index:
    """Inverted index over one corpus.

    postings maps token -> [(doc_id, term_frequency), ...] sorted by doc_id;
    doc ids are corpus record indexes in load order.
    """

    def __init__(
        self,
        postings: dict[str, list[tuple[int, int]]],
        doc_lengths: list[int],
        doc_names: list[str],
        doc_ingredients: list[list[str]],
        rendered: list[str],
        corpus_fingerprint: str,
    ):
        self.postings = postings
        self.doc_lengths = doc_lengths
        self.doc_names = doc_names
        self.doc_ingredients = doc_ingredients
        self.rendered = rendered
        self.corpus_fingerprint = corpus_fingerprint
        self.doc_count = len(doc_lengths)
        self.avg_doc_length = sum(doc_lengths) / self.doc_count if doc_lengths else 0.0

    def to_dict(self) -> dict:
        return {
            "corpus_fingerprint": self.corpus_fingerprint,
            "doc_names": self.doc_names,
            "doc_lengths": self.doc_lengths,
            "doc_ingredients": self.doc_ingredients,
            "rendered": self.rendered,
            "postings": {tok: [[d, tf] for d, tf in plist] for tok, plist in self.postings.items()},
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Index":
        postings = {
            tok: [(int(d), int(tf)) for d, tf in plist] for tok, plist in obj["postings"].items()
        }
        return cls(
            postings=postings,
            doc_lengths=[int(x) for x in obj["doc_lengths"]],
            doc_names=list(obj["doc_names"]),
            doc_ingredients=[list(x) for x in obj["doc_ingredients"]],
            rendered=list(obj["rendered"]),
            corpus_fingerprint=obj["corpus_fingerprint"],
        )

    def save(self, path: str | Path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, ensure_ascii=False)

    @classmethod
    def load(cls, path: str | Path) -> "Index":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


def build_index(corpus: Corpus) -> Index:
    """Index every record; the indexed text is name + ingredient display
    forms + source text (when present), joined by spaces."""
    postings: dict[str, list[tuple[int, int]]] = defaultdict(list)
    doc_lengths = []
    doc_names = []
    doc_ingredients = []
    rendered = []
    for doc_id, rec in enumerate(corpus.records):
        parts = [rec.name] + rec.display_ingredients()
        if rec.source_text:
            parts.append(rec.source_text)
        tokens = tokenize(" ".join(parts))
        doc_lengths.append(len(tokens))
        doc_names.append(rec.name)
        doc_ingredients.append(rec.display_ingredients())
        rendered.append(render_entry(rec))
        for token, tf in Counter(tokens).items():
            # doc ids arrive in ascending order, so lists stay sorted
            postings[token].append((doc_id, tf))
    return Index(
        postings=dict(postings),
        doc_lengths=doc_lengths,
        doc_names=doc_names,
        doc_ingredients=doc_ingredients,
        rendered=rendered,
        corpus_fingerprint=corpus.fingerprint(),
    )


def idf(doc_count: int, doc_frequency: int) -> float:
    """Smoothed non-negative idf."""
    return math.log(1.0 + (doc_count - doc_frequency + 0.5) / (doc_frequency + 0.5))


def search(
    index: Index,
    query: str,
    k: int = DEFAULT_TOP_K,
    k1: float = DEFAULT_K1,
    b: float = DEFAULT_B,
) -> list[RetrievedEntry]:
    """Top-k BM25 matches, ties broken by ascending doc_id; zero scores drop."""
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    scores: dict[int, float] = defaultdict(float)
    for token in tokenize(query):
        plist = index.postings.get(token)
        if not plist:
            continue
        token_idf = idf(index.doc_count, len(plist))
        for doc_id, tf in plist:
            norm = k1 * (1.0 - b + b * index.doc_lengths[doc_id] / index.avg_doc_length)
            scores[doc_id] += token_idf * tf * (k1 + 1.0) / (tf + norm)
    ranked = sorted(
        ((doc_id, score) for doc_id, score in scores.items() if score > 0.0),
        key=lambda pair: (-pair[1], pair[0]),
    )[:k]
    return [
        RetrievedEntry(
            doc_id=doc_id,
            drug_name=index.doc_names[doc_id],
            score=score,
            rendered_text=index.rendered[doc_id],
        )
        for doc_id, score in ranked
    ]
