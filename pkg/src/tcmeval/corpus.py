"""Pharmacopoeia corpus model: drug records, ingredient parsing, name normalization.

Every downstream string comparison (dataset perturbation, retrieval, answer
scoring) goes through the canonical forms produced here, so the normalization
rules live in exactly one place.
"""

from __future__ import annotations

import csv
import hashlib
import json
import re
import unicodedata
from collections import Counter
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence


class CorpusError(ValueError):
    """Unusable name, malformed corpus file, or a violated corpus invariant."""


# Full-width ASCII variants (U+FF01..U+FF5E) fold to half-width, except the
# parentheses: processing markers keep their original paren style so raw
# ingredient strings round-trip unchanged.
_FULLWIDTH_FIRST = 0xFF01
_FULLWIDTH_LAST = 0xFF5E
_FULLWIDTH_OFFSET = 0xFEE0
_KEEP_FULLWIDTH = {"（", "）"}

_WHITESPACE = re.compile(r"\s+")


def fold_fullwidth(text: str) -> str:
    """Fold full-width ASCII variants to half-width, parentheses excluded."""
    chars = []
    for ch in text:
        code = ord(ch)
        if _FULLWIDTH_FIRST <= code <= _FULLWIDTH_LAST and ch not in _KEEP_FULLWIDTH:
            ch = chr(code - _FULLWIDTH_OFFSET)
        chars.append(ch)
    return "".join(chars)


def normalize_name(raw: str) -> str:
    """Return the canonical spelling of a drug or ingredient name.

    NFC normalization, then full-width-to-half-width folding (parentheses
    excluded), then removal of all whitespace including internal runs.
    Raises CorpusError if nothing is left.
    """
    if not isinstance(raw, str):
        raise CorpusError(f"name must be a string, got {type(raw).__name__}")
    text = unicodedata.normalize("NFC", raw)
    text = _WHITESPACE.sub("", fold_fullwidth(text))
    if not text:
        raise CorpusError(f"name is empty after normalization: {raw!r}")
    return text


@dataclass(frozen=True)
class Ingredient:
    """A parsed ingredient: canonical name plus an optional processing marker.

    ``raw`` is the normalized display form with the marker still attached,
    e.g. canonical ``草乌`` with marker ``蒸`` and raw ``草乌（蒸）``.
    """

    canonical: str
    processing_marker: Optional[str]
    raw: str

    def match_key(self, markers: bool = False) -> str:
        """Comparison key: canonical name, or the marker-qualified form."""
        if markers and self.processing_marker is not None:
            return f"{self.canonical}（{self.processing_marker}）"
        return self.canonical


# One trailing parenthesized chunk, either paren style, nothing after it.
_MARKER = re.compile(r"^(?P<stem>.+?)(?:（(?P<wide>[^（）()]+)）|\((?P<ascii>[^()（）]+)\))$")
_ONLY_MARKER = re.compile(r"^(?:（[^（）]*）|\([^()]*\))$")


def parse_ingredient(raw: str) -> Ingredient:
    """Split an ingredient string into canonical name and processing marker.

    Only a single trailing parenthesized marker is split off; both paren
    styles are recognized. An input that is nothing but a marker is an error.
    """
    name = normalize_name(raw)
    if _ONLY_MARKER.match(name):
        raise CorpusError(f"ingredient has no canonical name, only a marker: {raw!r}")
    m = _MARKER.match(name)
    if m:
        marker = m.group("wide") or m.group("ascii")
        return Ingredient(canonical=m.group("stem"), processing_marker=marker, raw=name)
    return Ingredient(canonical=name, processing_marker=None, raw=name)


@dataclass(frozen=True)
class DrugRecord:
    """One corpus entry: drug name, ordered ingredients, optional source text."""

    name: str
    ingredients: tuple[Ingredient, ...]
    source_text: Optional[str] = None

    def display_ingredients(self) -> list[str]:
        return [ing.raw for ing in self.ingredients]

    def canonical_ingredients(self) -> list[str]:
        return [ing.canonical for ing in self.ingredients]

    def match_keys(self, markers: bool = False) -> set[str]:
        return {ing.match_key(markers) for ing in self.ingredients}


def make_record(
    name: str,
    ingredient_names: Sequence[str],
    source_text: Optional[str] = None,
    *,
    context: str = "",
) -> DrugRecord:
    """Build a validated DrugRecord from raw strings.

    Rejects empty ingredient lists and ingredients that collapse to the same
    canonical name within one record.
    """
    drug = normalize_name(name)
    if not ingredient_names:
        raise CorpusError(f"{context}drug {drug!r}: empty ingredient list")
    parsed = []
    seen: dict[str, str] = {}
    for raw in ingredient_names:
        try:
            ing = parse_ingredient(raw)
        except CorpusError as exc:
            raise CorpusError(f"{context}drug {drug!r}: {exc}") from exc
        if ing.canonical in seen:
            raise CorpusError(
                f"{context}drug {drug!r}: duplicate ingredient {ing.canonical!r} "
                f"(from {seen[ing.canonical]!r} and {raw!r})"
            )
        seen[ing.canonical] = raw
        parsed.append(ing)
    text = source_text if source_text else None
    if text is not None and not isinstance(text, str):
        raise CorpusError(f"{context}drug {drug!r}: text field must be a string")
    return DrugRecord(name=drug, ingredients=tuple(parsed), source_text=text)


class Corpus:
    """An immutable set of drug records with name and ingredient indexes."""

    def __init__(self, records: Iterable[DrugRecord]):
        recs = tuple(records)
        if not recs:
            raise CorpusError("corpus has no records")
        by_name: dict[str, DrugRecord] = {}
        for rec in recs:
            if rec.name in by_name:
                raise CorpusError(f"duplicate drug name in corpus: {rec.name!r}")
            by_name[rec.name] = rec
        pool: set[str] = set()
        display: dict[str, str] = {}
        for rec in recs:
            for ing in rec.ingredients:
                pool.add(ing.canonical)
                # first-seen raw form is the display form used when a
                # canonical name has to be shown to a model
                display.setdefault(ing.canonical, ing.raw)
        self.records = recs
        self.ingredient_pool = frozenset(pool)
        self._by_name = by_name
        self._display = display

    def __len__(self) -> int:
        return len(self.records)

    def __iter__(self) -> Iterator[DrugRecord]:
        return iter(self.records)

    def lookup(self, name: str) -> DrugRecord:
        """Find a record by (normalized) drug name."""
        key = normalize_name(name)
        try:
            return self._by_name[key]
        except KeyError:
            raise CorpusError(f"unknown drug: {name!r}") from None

    def __contains__(self, name: str) -> bool:
        try:
            self.lookup(name)
        except CorpusError:
            return False
        return True

    def display_form(self, canonical: str) -> str:
        """First-seen raw form for a canonical ingredient name."""
        return self._display.get(canonical, canonical)

    def oracle_frequency(self) -> Counter:
        """canonical ingredient -> number of records containing it."""
        freq: Counter = Counter()
        for rec in self.records:
            for ing in rec.ingredients:
                freq[ing.canonical] += 1
        return freq

    def fingerprint(self) -> str:
        """sha256 over the canonical serialization of all records, load order."""
        payload = [
            [rec.name, [ing.raw for ing in rec.ingredients], rec.source_text or ""]
            for rec in self.records
        ]
        blob = json.dumps(payload, ensure_ascii=False, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


def _record_from_obj(obj: object, context: str) -> DrugRecord:
    if not isinstance(obj, dict):
        raise CorpusError(f"{context}record must be a JSON object")
    name = obj.get("name")
    ingredients = obj.get("ingredients")
    if not isinstance(name, str):
        raise CorpusError(f"{context}missing or non-string 'name' field")
    if not isinstance(ingredients, list) or not all(isinstance(i, str) for i in ingredients):
        raise CorpusError(f"{context}'ingredients' must be a list of strings")
    text = obj.get("text")
    if text is not None and not isinstance(text, str):
        raise CorpusError(f"{context}'text' must be a string when present")
    # unknown fields are ignored on purpose: corpora come from scraped sources
    return make_record(name, ingredients, text, context=context)


def load_corpus(path: str | Path) -> Corpus:
    """Load a JSONL corpus: one object per line with name/ingredients/text."""
    records = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            context = f"{path}:{lineno}: "
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"{context}invalid JSON: {exc}") from exc
            records.append(_record_from_obj(obj, context))
    if not records:
        raise CorpusError(f"{path}: no records")
    return Corpus(records)


_CSV_SPLIT = re.compile(r"[;；、]")


def load_corpus_csv(path: str | Path) -> Corpus:
    """Load a CSV corpus with columns name, ingredients (;- or 、-separated), text."""
    records = []
    with open(path, encoding="utf-8", newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "name" not in reader.fieldnames:
            raise CorpusError(f"{path}: missing 'name' column")
        if "ingredients" not in reader.fieldnames:
            raise CorpusError(f"{path}: missing 'ingredients' column")
        for lineno, row in enumerate(reader, 2):
            context = f"{path}:{lineno}: "
            parts = [p for p in _CSV_SPLIT.split(row.get("ingredients") or "") if p.strip()]
            records.append(make_record(row.get("name") or "", parts, row.get("text"), context=context))
    if not records:
        raise CorpusError(f"{path}: no records")
    return Corpus(records)


def sample_corpus_path() -> Path:
    """Path of the bundled demonstration corpus."""
    return Path(str(resources.files("tcmeval").joinpath("data", "sample_corpus.jsonl")))
