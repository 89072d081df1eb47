"""Scoring: verification confusion metrics, answer-bias split, inquiry set
scores, herb-frequency analytics, and the failure-pattern detectors.

Percentages are computed as exact fractions and rounded half-up to two
decimals for reporting; raw full-precision values stay in the machine output.
Positive class for verification is "Yes" (a claimed match).
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from decimal import ROUND_HALF_UP, Decimal, localcontext
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from tcmeval.corpus import Corpus, CorpusError, parse_ingredient
from tcmeval.dataset import EvalDataset
from tcmeval.protocols import RunLog, RunRecord

INVALID_POLICIES = ("as_no", "exclude")
REPETITION_THRESHOLD = 3


class MetricsError(ValueError):
    """Protocol mismatch, incomplete run coverage, or empty input."""


def _round2(value: Fraction) -> float:
    with localcontext() as ctx:
        ctx.prec = 50
        dec = (Decimal(value.numerator) * 100) / Decimal(value.denominator)
        return float(dec.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass(frozen=True)
class ConfusionMatrix:
    """Counts with positive class = Yes; tp+fn / fp+tn are the scored T / F items."""

    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if any(c < 0 for c in (self.tp, self.fp, self.fn, self.tn)):
            raise MetricsError("confusion matrix counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn


@dataclass(frozen=True)
class MetricsRow:
    """Reported percentages (2-decimal half-up) with raw values alongside.

    A zero-denominator precision/recall is reported as 0 and flagged via the
    corresponding ``*_defined`` field.
    """

    accuracy: float
    precision: float
    recall: float
    f1: float
    invalid_count: int
    precision_defined: bool
    recall_defined: bool
    raw_accuracy: float
    raw_precision: float
    raw_recall: float
    raw_f1: float

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "invalid_count": self.invalid_count,
            "precision_defined": self.precision_defined,
            "recall_defined": self.recall_defined,
            "raw": {
                "accuracy": self.raw_accuracy,
                "precision": self.raw_precision,
                "recall": self.raw_recall,
                "f1": self.raw_f1,
            },
        }


def _check_verify_run(run: RunLog, dataset: EvalDataset) -> dict[int, RunRecord]:
    if run.protocol != "verify":
        raise MetricsError(f"expected a verify run, got {run.protocol!r}")
    return _join(run, dataset)


def _join(run: RunLog, dataset: EvalDataset) -> dict[int, RunRecord]:
    by_id = {rec.item_id: rec for rec in run.records}
    if len(by_id) != len(run.records):
        raise MetricsError("run log contains duplicate item_ids")
    wanted = {item.item_id for item in dataset.items}
    missing = wanted - set(by_id)
    if missing:
        raise MetricsError(f"run log covers {len(by_id)} items, dataset has {len(wanted)}")
    extra = set(by_id) - wanted
    if extra:
        raise MetricsError(f"run log has records for unknown item_ids: {sorted(extra)[:5]}")
    return by_id


def confusion(
    run: RunLog, dataset: EvalDataset, invalid_policy: str = "as_no"
) -> tuple[ConfusionMatrix, int]:
    """Confusion counts plus the number of Invalid answers encountered.

    Policy "as_no" treats Invalid as a No prediction (an expected-Yes item
    becomes fn, an expected-No item tn); "exclude" drops Invalid items from
    the counts and reports them separately.
    """
    if invalid_policy not in INVALID_POLICIES:
        raise MetricsError(f"unknown invalid policy {invalid_policy!r}")
    by_id = _check_verify_run(run, dataset)
    tp = fp = fn = tn = invalid = 0
    for item in dataset.items:
        parsed = by_id[item.item_id].parsed
        if parsed == "Invalid":
            invalid += 1
            if invalid_policy == "exclude":
                continue
            parsed = "No"
        elif parsed not in ("Yes", "No"):
            raise MetricsError(f"item {item.item_id}: non-verify parse {parsed!r}")
        if item.expected == "Yes":
            if parsed == "Yes":
                tp += 1
            else:
                fn += 1
        else:
            if parsed == "Yes":
                fp += 1
            else:
                tn += 1
    return ConfusionMatrix(tp=tp, fp=fp, fn=fn, tn=tn), invalid


def prf1(cm: ConfusionMatrix, invalid_count: int = 0) -> MetricsRow:
    """Accuracy/precision/recall/F1 percentages from a confusion matrix."""
    if cm.total == 0:
        raise MetricsError("cannot score an empty confusion matrix")
    accuracy = Fraction(cm.tp + cm.tn, cm.total)
    p_den = cm.tp + cm.fp
    r_den = cm.tp + cm.fn
    precision = Fraction(cm.tp, p_den) if p_den else Fraction(0)
    recall = Fraction(cm.tp, r_den) if r_den else Fraction(0)
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else Fraction(0)
    return MetricsRow(
        accuracy=_round2(accuracy),
        precision=_round2(precision),
        recall=_round2(recall),
        f1=_round2(f1),
        invalid_count=invalid_count,
        precision_defined=p_den > 0,
        recall_defined=r_den > 0,
        raw_accuracy=float(accuracy * 100),
        raw_precision=float(precision * 100),
        raw_recall=float(recall * 100),
        raw_f1=float(f1 * 100),
    )


@dataclass(frozen=True)
class BiasReport:
    """Accuracy split by expected answer; bias is the absolute gap."""

    accuracy_expected_no: Optional[float]
    accuracy_expected_yes: Optional[float]
    bias: Optional[float]

    def as_dict(self) -> dict:
        return {
            "accuracy_expected_no": self.accuracy_expected_no,
            "accuracy_expected_yes": self.accuracy_expected_yes,
            "bias": self.bias,
        }


def bias_accuracy(
    run: RunLog, dataset: EvalDataset, invalid_policy: str = "as_no"
) -> BiasReport:
    """Accuracy over F items (expected No) and T items (expected Yes)."""
    if invalid_policy not in INVALID_POLICIES:
        raise MetricsError(f"unknown invalid policy {invalid_policy!r}")
    by_id = _check_verify_run(run, dataset)
    hits = {"Yes": 0, "No": 0}
    totals = {"Yes": 0, "No": 0}
    for item in dataset.items:
        parsed = by_id[item.item_id].parsed
        if parsed == "Invalid":
            if invalid_policy == "exclude":
                continue
            parsed = "No"
        totals[item.expected] += 1
        if parsed == item.expected:
            hits[item.expected] += 1
    acc_no = _round2(Fraction(hits["No"], totals["No"])) if totals["No"] else None
    acc_yes = _round2(Fraction(hits["Yes"], totals["Yes"])) if totals["Yes"] else None
    bias = abs(acc_no - acc_yes) if acc_no is not None and acc_yes is not None else None
    return BiasReport(accuracy_expected_no=acc_no, accuracy_expected_yes=acc_yes, bias=bias)


@dataclass(frozen=True)
class RepetitionReport:
    max_run_length: int
    duplicate_count: int
    flagged: bool


def detect_repetition(predicted: Sequence[str], threshold: int = REPETITION_THRESHOLD) -> RepetitionReport:
    """Degenerate repetition: longest consecutive run of one name."""
    if threshold < 1:
        raise MetricsError("repetition threshold must be >= 1")
    max_run = 0
    run_len = 0
    prev = None
    for name in predicted:
        run_len = run_len + 1 if name == prev else 1
        prev = name
        max_run = max(max_run, run_len)
    duplicates = len(predicted) - len(set(predicted))
    return RepetitionReport(
        max_run_length=max_run, duplicate_count=duplicates, flagged=max_run >= threshold
    )


@dataclass(frozen=True)
class LiteralReport:
    flagged: bool
    literal_hits: tuple[str, ...]


def detect_literal(drug_name: str, predicted: Sequence[str], oracle: Sequence[str]) -> LiteralReport:
    """Name-reading failure: predicted names lifted from the drug name that
    are not actually in the oracle list."""
    oracle_set = set(oracle)
    hits = []
    for name in dict.fromkeys(predicted):
        if name and name in drug_name and name not in oracle_set:
            hits.append(name)
    return LiteralReport(flagged=bool(hits), literal_hits=tuple(hits))


@dataclass(frozen=True)
class ItemScore:
    item_id: int
    drug_name: str
    n_predicted: int  # distinct predicted names
    n_oracle: int
    tp: int
    precision: Optional[float]  # None when nothing was predicted
    recall: float
    f1: float
    max_run_length: int
    duplicate_count: int
    repetition_flagged: bool
    literal_flagged: bool
    literal_hits: tuple[str, ...]


@dataclass(frozen=True)
class InquiryReport:
    per_item: tuple[ItemScore, ...]
    micro_precision: Optional[float]
    micro_recall: float
    micro_f1: float
    macro_precision: float  # undefined per-item precisions counted as 0
    macro_recall: float
    macro_f1: float
    undefined_precision_count: int

    def as_dict(self) -> dict:
        return {
            "micro_precision": self.micro_precision,
            "micro_recall": self.micro_recall,
            "micro_f1": self.micro_f1,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "undefined_precision_count": self.undefined_precision_count,
            "items": len(self.per_item),
        }


def _predicted_keys(rec: RunRecord, markers: bool) -> list[str]:
    tokens = rec.parsed_tokens if rec.parsed_tokens is not None else rec.parsed
    if not isinstance(tokens, list):
        raise MetricsError(f"item {rec.item_id}: non-inquiry parse {tokens!r}")
    keys = []
    for token in tokens:
        try:
            keys.append(parse_ingredient(token).match_key(markers))
        except CorpusError:
            continue
    return keys


def _oracle_record(corpus: Corpus, item_id: int):
    if not (0 <= item_id < len(corpus.records)):
        raise MetricsError(f"item_id {item_id} outside corpus of {len(corpus.records)} records")
    return corpus.records[item_id]


def inquiry_scores(
    run: RunLog,
    corpus: Corpus,
    *,
    match_markers: bool = False,
    repetition_threshold: int = REPETITION_THRESHOLD,
) -> InquiryReport:
    """Set precision/recall/F1 per item plus micro and macro aggregates.

    Predicted sets deduplicate canonical (or marker-qualified) names; the
    duplicates still feed the repetition detector.
    """
    if run.protocol != "inquiry":
        raise MetricsError(f"expected an inquiry run, got {run.protocol!r}")
    if not run.records:
        raise MetricsError("empty run log")
    per_item = []
    sum_tp = sum_pred = sum_oracle = 0
    macro_p = macro_r = macro_f1 = Fraction(0)
    undefined = 0
    for rec in run.records:
        record = _oracle_record(corpus, rec.item_id)
        oracle_keys = record.match_keys(match_markers)
        predicted_seq = _predicted_keys(rec, match_markers)
        predicted = set(predicted_seq)
        tp = len(predicted & oracle_keys)
        n_pred = len(predicted)
        n_oracle = len(oracle_keys)
        precision = Fraction(tp, n_pred) if n_pred else None
        recall = Fraction(tp, n_oracle)
        p_for_f1 = precision if precision is not None else Fraction(0)
        f1 = (
            2 * p_for_f1 * recall / (p_for_f1 + recall)
            if p_for_f1 + recall
            else Fraction(0)
        )
        repetition = detect_repetition(predicted_seq, repetition_threshold)
        literal = detect_literal(record.name, predicted_seq, oracle_keys)
        per_item.append(
            ItemScore(
                item_id=rec.item_id,
                drug_name=record.name,
                n_predicted=n_pred,
                n_oracle=n_oracle,
                tp=tp,
                precision=float(precision) if precision is not None else None,
                recall=float(recall),
                f1=float(f1),
                max_run_length=repetition.max_run_length,
                duplicate_count=repetition.duplicate_count,
                repetition_flagged=repetition.flagged,
                literal_flagged=literal.flagged,
                literal_hits=literal.literal_hits,
            )
        )
        sum_tp += tp
        sum_pred += n_pred
        sum_oracle += n_oracle
        if precision is None:
            undefined += 1
        macro_p += p_for_f1
        macro_r += recall
        macro_f1 += f1
    count = len(per_item)
    micro_p = Fraction(sum_tp, sum_pred) if sum_pred else None
    micro_r = Fraction(sum_tp, sum_oracle)
    mp = micro_p if micro_p is not None else Fraction(0)
    micro_f1 = 2 * mp * micro_r / (mp + micro_r) if mp + micro_r else Fraction(0)
    return InquiryReport(
        per_item=tuple(per_item),
        micro_precision=float(micro_p) if micro_p is not None else None,
        micro_recall=float(micro_r),
        micro_f1=float(micro_f1),
        macro_precision=float(macro_p / count),
        macro_recall=float(macro_r / count),
        macro_f1=float(macro_f1 / count),
        undefined_precision_count=undefined,
    )


@dataclass(frozen=True)
class HerbStats:
    """Per-herb membership stats over (drug, herb) pairs.

    response_freq counts responses containing the herb at least once;
    total_mentions counts every occurrence including duplicates.
    """

    herb: str
    oracle_freq: int
    response_freq: int
    total_mentions: int
    tp: int
    fp: int
    fn: int
    precision: Optional[float]
    recall: Optional[float]


def herb_frequency(
    run: RunLog,
    corpus: Corpus,
    dataset: Optional[EvalDataset] = None,
    *,
    match_markers: bool = False,
) -> list[HerbStats]:
    """Oracle vs response frequency and per-herb precision/recall.

    Stats are sorted by descending oracle_freq, then name. When a dataset is
    given, the run must cover it exactly.
    """
    if run.protocol != "inquiry":
        raise MetricsError(f"expected an inquiry run, got {run.protocol!r}")
    if dataset is not None:
        _join(run, dataset)
    oracle_freq: dict[str, int] = {}
    response_freq: dict[str, int] = {}
    mentions: dict[str, int] = {}
    tp: dict[str, int] = {}
    fp: dict[str, int] = {}
    fn: dict[str, int] = {}
    for rec in run.records:
        record = _oracle_record(corpus, rec.item_id)
        oracle_keys = record.match_keys(match_markers)
        predicted_seq = _predicted_keys(rec, match_markers)
        predicted = set(predicted_seq)
        for herb in oracle_keys:
            oracle_freq[herb] = oracle_freq.get(herb, 0) + 1
        for herb in predicted:
            response_freq[herb] = response_freq.get(herb, 0) + 1
        for herb in predicted_seq:
            mentions[herb] = mentions.get(herb, 0) + 1
        for herb in predicted & oracle_keys:
            tp[herb] = tp.get(herb, 0) + 1
        for herb in predicted - oracle_keys:
            fp[herb] = fp.get(herb, 0) + 1
        for herb in oracle_keys - predicted:
            fn[herb] = fn.get(herb, 0) + 1
    herbs = set(oracle_freq) | set(response_freq)
    stats = []
    for herb in herbs:
        h_tp = tp.get(herb, 0)
        h_fp = fp.get(herb, 0)
        h_fn = fn.get(herb, 0)
        precision = h_tp / (h_tp + h_fp) if h_tp + h_fp else None
        recall = h_tp / (h_tp + h_fn) if h_tp + h_fn else None
        stats.append(
            HerbStats(
                herb=herb,
                oracle_freq=oracle_freq.get(herb, 0),
                response_freq=response_freq.get(herb, 0),
                total_mentions=mentions.get(herb, 0),
                tp=h_tp,
                fp=h_fp,
                fn=h_fn,
                precision=precision,
                recall=recall,
            )
        )
    stats.sort(key=lambda s: (-s.oracle_freq, s.herb))
    return stats


def top_bottom_herb_report(
    stats: Sequence[HerbStats], n: int = 10
) -> tuple[list[HerbStats], list[HerbStats]]:
    """Top-n and bottom-n herbs by oracle frequency, ties lexicographic.

    Herbs never appearing in an oracle list (pure hallucinations) are
    excluded from both rankings.
    """
    if n < 1:
        raise MetricsError("n must be >= 1")
    in_oracle = [s for s in stats if s.oracle_freq >= 1]
    top = sorted(in_oracle, key=lambda s: (-s.oracle_freq, s.herb))[:n]
    bottom = sorted(in_oracle, key=lambda s: (s.oracle_freq, s.herb))[:n]
    return top, bottom


@dataclass(frozen=True)
class VerifySummary:
    cm: ConfusionMatrix
    invalid_count: int
    row: MetricsRow
    bias: BiasReport
    excluded: bool

    def as_dict(self) -> dict:
        return {
            "confusion": {
                "tp": self.cm.tp,
                "fp": self.cm.fp,
                "fn": self.cm.fn,
                "tn": self.cm.tn,
            },
            "invalid_count": self.invalid_count,
            "invalid_policy": "exclude" if self.excluded else "as_no",
            "metrics": self.row.as_dict(),
            "bias": self.bias.as_dict(),
        }


def score_verify_run(
    run: RunLog, dataset: EvalDataset, *, invalid_policy: str = "as_no"
) -> VerifySummary:
    cm, invalid = confusion(run, dataset, invalid_policy)
    row = prf1(cm, invalid_count=invalid)
    bias = bias_accuracy(run, dataset, invalid_policy)
    return VerifySummary(
        cm=cm, invalid_count=invalid, row=row, bias=bias, excluded=invalid_policy == "exclude"
    )


@dataclass(frozen=True)
class InquirySummary:
    report: InquiryReport
    herb_stats: list[HerbStats]
    top: list[HerbStats]
    bottom: list[HerbStats]

    def as_dict(self) -> dict:
        return {
            "scores": self.report.as_dict(),
            "repetition_flagged": sum(1 for s in self.report.per_item if s.repetition_flagged),
            "literal_flagged": sum(1 for s in self.report.per_item if s.literal_flagged),
            "distinct_herbs": len(self.herb_stats),
        }


def score_inquiry_run(
    run: RunLog,
    corpus: Corpus,
    dataset: Optional[EvalDataset] = None,
    *,
    match_markers: bool = False,
    repetition_threshold: int = REPETITION_THRESHOLD,
) -> InquirySummary:
    report = inquiry_scores(
        run, corpus, match_markers=match_markers, repetition_threshold=repetition_threshold
    )
    stats = herb_frequency(run, corpus, dataset, match_markers=match_markers)
    top, bottom = top_bottom_herb_report(stats)
    return InquirySummary(report=report, herb_stats=stats, top=top, bottom=bottom)


def _fmt(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.4f}"


def write_verify_csvs(
    summary: VerifySummary, out_dir: str | Path, label: str, meta_comment: str
) -> list[Path]:
    """metrics_table.csv (result-table analog) and bias.csv (bias-figure analog)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    table = out_dir / "metrics_table.csv"
    with open(table, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {meta_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(
            ["provider", "accuracy", "precision", "recall", "f1", "invalid_count", "tp", "fp", "fn", "tn"]
        )
        row = summary.row
        writer.writerow(
            [
                label,
                f"{row.accuracy:.2f}",
                f"{row.precision:.2f}",
                f"{row.recall:.2f}",
                f"{row.f1:.2f}",
                row.invalid_count,
                summary.cm.tp,
                summary.cm.fp,
                summary.cm.fn,
                summary.cm.tn,
            ]
        )
    bias_path = out_dir / "bias.csv"
    with open(bias_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {meta_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["provider", "accuracy_expected_no", "accuracy_expected_yes", "bias"])
        b = summary.bias
        writer.writerow(
            [
                label,
                "" if b.accuracy_expected_no is None else f"{b.accuracy_expected_no:.2f}",
                "" if b.accuracy_expected_yes is None else f"{b.accuracy_expected_yes:.2f}",
                "" if b.bias is None else f"{b.bias:.2f}",
            ]
        )
    return [table, bias_path]


def write_inquiry_csvs(
    summary: InquirySummary, out_dir: str | Path, label: str, meta_comment: str
) -> list[Path]:
    """Per-item scores, the frequency scatter table, and top/bottom rankings."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []

    items_path = out_dir / "inquiry_items.csv"
    with open(items_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {meta_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(
            [
                "item_id",
                "drug_name",
                "n_predicted",
                "n_oracle",
                "tp",
                "precision",
                "recall",
                "f1",
                "max_run_length",
                "duplicate_count",
                "repetition_flagged",
                "literal_flagged",
                "literal_hits",
            ]
        )
        for s in summary.report.per_item:
            writer.writerow(
                [
                    s.item_id,
                    s.drug_name,
                    s.n_predicted,
                    s.n_oracle,
                    s.tp,
                    _fmt(s.precision),
                    _fmt(s.recall),
                    _fmt(s.f1),
                    s.max_run_length,
                    s.duplicate_count,
                    int(s.repetition_flagged),
                    int(s.literal_flagged),
                    "、".join(s.literal_hits),
                ]
            )
    paths.append(items_path)

    freq_path = out_dir / "herb_frequency.csv"
    with open(freq_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(f"# {meta_comment}\n")
        writer = csv.writer(fh)
        writer.writerow(["herb", "oracle_freq", "response_freq", "total_mentions"])
        for s in summary.herb_stats:
            writer.writerow([s.herb, s.oracle_freq, s.response_freq, s.total_mentions])
    paths.append(freq_path)

    for name, ranked in (("herb_prf_top.csv", summary.top), ("herb_prf_bottom.csv", summary.bottom)):
        path = out_dir / name
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(f"# {meta_comment}\n")
            writer = csv.writer(fh)
            writer.writerow(
                ["herb", "oracle_freq", "response_freq", "tp", "fp", "fn", "precision", "recall"]
            )
            for s in ranked:
                writer.writerow(
                    [
                        s.herb,
                        s.oracle_freq,
                        s.response_freq,
                        s.tp,
                        s.fp,
                        s.fn,
                        _fmt(s.precision),
                        _fmt(s.recall),
                    ]
                )
        paths.append(path)
    return paths


def write_metrics_json(
    payload: dict, out_dir: str | Path, meta: dict
) -> Path:
    """metrics.json with the meta block first."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "metrics.json"
    ordered = {"meta": meta}
    ordered.update(payload)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(ordered, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    return path
