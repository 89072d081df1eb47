"""Perturbed verification datasets.

Half of the corpus keeps its true ingredient list (subset T, expected answer
Yes), the other half gets an adversarially perturbed list (subset F, expected
answer No). All randomness flows from one seeded ``random.Random`` so a
(corpus, seed) pair rebuilds byte-identically.
"""

from __future__ import annotations

import hashlib
import json
import math
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

from tcmeval.corpus import Corpus, parse_ingredient

REPLACEMENT_RULE = "r = max(1, ceil(n/2))"


class DatasetError(ValueError):
    """Malformed dataset file or an unsatisfiable build precondition."""


@dataclass(frozen=True)
class EvalItem:
    """One evaluation case.

    ``presented_ingredients`` holds display forms (processing markers kept)
    so marker-aware scoring stays possible downstream; comparisons
    canonicalize according to the active matching mode.
    """

    item_id: int
    drug_name: str
    presented_ingredients: tuple[str, ...]
    subset: str  # "T" or "F"
    expected: str  # "Yes" or "No"
    replaced_positions: tuple[int, ...]


@dataclass(frozen=True)
class EvalDataset:
    items: tuple[EvalItem, ...]
    seed: int
    corpus_fingerprint: str

    def t_items(self) -> list[EvalItem]:
        return [it for it in self.items if it.subset == "T"]

    def f_items(self) -> list[EvalItem]:
        return [it for it in self.items if it.subset == "F"]

    def fingerprint(self) -> str:
        """sha256 over seed, corpus fingerprint, and all item lines in order."""
        h = hashlib.sha256()
        h.update(f"{self.seed}:{self.corpus_fingerprint}".encode("utf-8"))
        for item in self.items:
            h.update(_item_line(item).encode("utf-8"))
        return h.hexdigest()


def split_halves(record_ids: Sequence[int], rng: random.Random) -> tuple[list[int], list[int]]:
    """Randomly split ids into (T, F); T gets the extra element when odd."""
    ids = list(record_ids)
    rng.shuffle(ids)
    cut = math.ceil(len(ids) / 2)
    return ids[:cut], ids[cut:]


def perturb_ingredients(
    truth: Sequence[str],
    pool: frozenset[str] | set[str],
    rng: random.Random,
    display: Optional[Callable[[str], str]] = None,
) -> tuple[list[str], list[int]]:
    """Replace r = max(1, ceil(n/2)) entries of a true ingredient list.

    Replacements are drawn uniformly without repetition from the pool minus
    the truth set minus anything already chosen; replaced positions are drawn
    uniformly without repetition and processed in ascending order. Returns
    (presented list, sorted replaced positions).
    """
    truth = list(truth)
    n = len(truth)
    if n == 0:
        raise DatasetError("cannot perturb an empty ingredient list")
    r = max(1, math.ceil(n / 2))
    truth_keys = {parse_ingredient(t).canonical for t in truth}
    candidates = sorted(set(pool) - truth_keys)
    if len(candidates) < r:
        raise DatasetError(
            f"replacement pool too small: need {r} candidates, have {len(candidates)}"
        )
    positions = sorted(rng.sample(range(n), r))
    presented = list(truth)
    chosen: set[str] = set()
    for pos in positions:
        available = [c for c in candidates if c not in chosen]
        pick = rng.choice(available)
        chosen.add(pick)
        presented[pos] = display(pick) if display is not None else pick
    return presented, positions


def build_dataset(corpus: Corpus, seed: int) -> EvalDataset:
    """Build the mixed T/F dataset for a corpus under one seed.

    Draw order is fixed: (1) shuffle-split record ids into halves, (2) for
    each F record in split order, draw replaced positions then replacements,
    (3) shuffle the combined item list into presentation order. item_id is
    the record's index in corpus load order.
    """
    rng = random.Random(seed)
    t_ids, f_ids = split_halves(range(len(corpus.records)), rng)

    items = []
    for rid in t_ids:
        rec = corpus.records[rid]
        items.append(
            EvalItem(
                item_id=rid,
                drug_name=rec.name,
                presented_ingredients=tuple(rec.display_ingredients()),
                subset="T",
                expected="Yes",
                replaced_positions=(),
            )
        )
    for rid in f_ids:
        rec = corpus.records[rid]
        try:
            presented, positions = perturb_ingredients(
                rec.display_ingredients(),
                corpus.ingredient_pool,
                rng,
                display=corpus.display_form,
            )
        except DatasetError as exc:
            raise DatasetError(f"drug {rec.name!r}: {exc}") from exc
        items.append(
            EvalItem(
                item_id=rid,
                drug_name=rec.name,
                presented_ingredients=tuple(presented),
                subset="F",
                expected="No",
                replaced_positions=tuple(positions),
            )
        )
    rng.shuffle(items)
    return EvalDataset(items=tuple(items), seed=seed, corpus_fingerprint=corpus.fingerprint())


def subset_view(dataset: EvalDataset, subset: str) -> EvalDataset:
    """Dataset restricted to one subset, presentation order preserved."""
    if subset not in ("T", "F"):
        raise DatasetError(f"unknown subset {subset!r}, expected 'T' or 'F'")
    kept = tuple(it for it in dataset.items if it.subset == subset)
    return EvalDataset(items=kept, seed=dataset.seed, corpus_fingerprint=dataset.corpus_fingerprint)


def _item_line(item: EvalItem) -> str:
    obj = {
        "item_id": item.item_id,
        "drug_name": item.drug_name,
        "presented_ingredients": list(item.presented_ingredients),
        "subset": item.subset,
        "expected": item.expected,
        "replaced_positions": list(item.replaced_positions),
    }
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


def save_dataset(dataset: EvalDataset, path: str | Path) -> None:
    """Write JSONL: a meta header line, then one item per line in order."""
    meta = {
        "meta": {
            "seed": dataset.seed,
            "corpus_fingerprint": dataset.corpus_fingerprint,
            "replacement_rule": REPLACEMENT_RULE,
            "subset_counts": {
                "T": len(dataset.t_items()),
                "F": len(dataset.f_items()),
            },
        }
    }
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(meta, ensure_ascii=False, separators=(",", ":")) + "\n")
        for item in dataset.items:
            fh.write(_item_line(item) + "\n")


def load_dataset(path: str | Path) -> EvalDataset:
    """Read a dataset written by save_dataset, validating structure."""
    items = []
    meta = None
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            context = f"{path}:{lineno}: "
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DatasetError(f"{context}invalid JSON: {exc}") from exc
            if "meta" in obj:
                if meta is not None:
                    raise DatasetError(f"{context}duplicate meta line")
                meta = obj["meta"]
                continue
            try:
                item = EvalItem(
                    item_id=int(obj["item_id"]),
                    drug_name=obj["drug_name"],
                    presented_ingredients=tuple(obj["presented_ingredients"]),
                    subset=obj["subset"],
                    expected=obj["expected"],
                    replaced_positions=tuple(int(p) for p in obj["replaced_positions"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise DatasetError(f"{context}bad item: {exc}") from exc
            if item.subset not in ("T", "F") or item.expected not in ("Yes", "No"):
                raise DatasetError(f"{context}bad subset/expected pair")
            items.append(item)
    if meta is None:
        raise DatasetError(f"{path}: missing meta header line")
    try:
        seed = int(meta["seed"])
        corpus_fingerprint = str(meta["corpus_fingerprint"])
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"{path}: bad meta header: {exc}") from exc
    if not items:
        raise DatasetError(f"{path}: no items")
    ids = [it.item_id for it in items]
    if len(set(ids)) != len(ids):
        raise DatasetError(f"{path}: duplicate item_id")
    return EvalDataset(items=tuple(items), seed=seed, corpus_fingerprint=corpus_fingerprint)
