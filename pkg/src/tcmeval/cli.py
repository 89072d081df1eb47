"""Command-line pipeline: dataset build -> run -> score -> report.

Exit codes: 0 success, 1 runtime failure (e.g. provider error rate over the
threshold), 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path
from typing import Optional

from tcmeval import __version__
from tcmeval.corpus import Corpus, CorpusError, load_corpus, load_corpus_csv
from tcmeval.dataset import (
    DatasetError,
    build_dataset,
    load_dataset,
    save_dataset,
    subset_view,
)
from tcmeval.metrics import (
    MetricsError,
    score_inquiry_run,
    score_verify_run,
    write_inquiry_csvs,
    write_metrics_json,
    write_verify_csvs,
)
from tcmeval.protocols import (
    PROTOCOLS,
    RunLogError,
    load_runlog,
    run_protocol,
    save_runlog,
)
from tcmeval.providers import (
    ProviderConfigError,
    load_provider_config,
    make_provider,
)


class UsageFailure(Exception):
    """Bad inputs detected past argument parsing; maps to exit code 2."""


def _load_corpus_any(path: str) -> Corpus:
    if path.endswith(".csv"):
        return load_corpus_csv(path)
    return load_corpus(path)


def _file_sha256(path: str | Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            digest.update(chunk)
    return digest.hexdigest()


def provider_label(config: dict) -> str:
    kind = config.get("kind", "unknown")
    if kind == "remote":
        return config.get("model_name") or "remote"
    if kind == "rag":
        return f"rag({provider_label(config.get('inner') or {})})"
    if kind == "biased":
        return f"biased[{config.get('mode', '?')}]"
    if kind == "common_herb":
        return f"common_herb[m={config.get('top_m', '?')}]"
    return kind


def cmd_dataset_build(args: argparse.Namespace) -> int:
    corpus = _load_corpus_any(args.corpus)
    dataset = build_dataset(corpus, args.seed)
    out = Path(args.out)
    save_dataset(dataset, out)
    f_path = out.with_name(out.stem + ".F" + (out.suffix or ".jsonl"))
    t_path = out.with_name(out.stem + ".T" + (out.suffix or ".jsonl"))
    save_dataset(subset_view(dataset, "F"), f_path)
    save_dataset(subset_view(dataset, "T"), t_path)
    print(
        f"wrote {len(dataset.items)} items "
        f"(T={len(dataset.t_items())}, F={len(dataset.f_items())}) to {out}"
    )
    print(f"subset files: {f_path} {t_path}")
    return 0


def cmd_run(args: argparse.Namespace) -> int:
    dataset = load_dataset(args.dataset)
    corpus = _load_corpus_any(args.corpus) if args.corpus else None
    if corpus is not None and corpus.fingerprint() != dataset.corpus_fingerprint:
        raise UsageFailure(
            f"corpus fingerprint {corpus.fingerprint()[:12]}… does not match "
            f"the dataset's {dataset.corpus_fingerprint[:12]}…"
        )
    config = load_provider_config(args.provider_config)
    if args.lang:
        config.lang = args.lang
    provider = make_provider(config, corpus=corpus, dataset=dataset)
    concurrency = args.concurrency if args.concurrency else config.concurrency_limit
    log = run_protocol(
        dataset,
        provider,
        args.protocol,
        concurrency_limit=concurrency,
        lang=args.lang or "zh",
        log_path=args.out,
        resume=args.resume,
        provider_config=config.snapshot(),
    )
    save_runlog(log, args.out)  # normalize: presentation order, final meta
    errors = sum(1 for rec in log.records if rec.error is not None)
    rate = log.error_rate()
    print(
        f"ran {args.protocol} over {len(log.records)} items "
        f"({errors} errors, rate {rate:.2%}) -> {args.out}"
    )
    if rate > args.max_error_rate:
        print(
            f"error rate {rate:.2%} exceeds --max-error-rate {args.max_error_rate:.2%}",
            file=sys.stderr,
        )
        return 1
    return 0


def cmd_score(args: argparse.Namespace) -> int:
    run = load_runlog(args.run)
    dataset = load_dataset(args.dataset)
    corpus = _load_corpus_any(args.corpus)
    dataset_fp = dataset.fingerprint()
    corpus_fp = corpus.fingerprint()
    if run.dataset_fingerprint != dataset_fp:
        raise UsageFailure(
            f"run log was produced from dataset {run.dataset_fingerprint[:12]}…, "
            f"got {dataset_fp[:12]}…"
        )
    if dataset.corpus_fingerprint != corpus_fp:
        raise UsageFailure(
            f"dataset was built from corpus {dataset.corpus_fingerprint[:12]}…, "
            f"got {corpus_fp[:12]}…"
        )
    label = args.label or provider_label(run.provider_config)
    meta_comment = (
        f"tcmeval {__version__} protocol={run.protocol} provider={label} "
        f"corpus=sha256:{corpus_fp[:12]} dataset=sha256:{dataset_fp[:12]}"
    )
    meta = {
        "tool_version": __version__,
        "protocol": run.protocol,
        "provider": label,
        "provider_config": run.provider_config,
        "lang": run.lang,
        "dataset_seed": dataset.seed,
        "fingerprints": {
            "corpus": corpus_fp,
            "dataset": dataset_fp,
            "run_file": _file_sha256(args.run),
        },
    }
    out_dir = Path(args.out_dir)
    if run.protocol == "verify":
        policy = "exclude" if args.exclude_invalid else "as_no"
        summary = score_verify_run(run, dataset, invalid_policy=policy)
        paths = write_verify_csvs(summary, out_dir, label, meta_comment)
        paths.append(write_metrics_json(summary.as_dict(), out_dir, meta))
        row = summary.row
        print(
            f"{label}: accuracy {row.accuracy:.2f} precision {row.precision:.2f} "
            f"recall {row.recall:.2f} F1 {row.f1:.2f} "
            f"(invalid {summary.invalid_count}, policy {policy})"
        )
    else:
        summary = score_inquiry_run(run, corpus, dataset, match_markers=args.match_markers)
        paths = write_inquiry_csvs(summary, out_dir, label, meta_comment)
        paths.append(write_metrics_json(summary.as_dict(), out_dir, meta))
        report = summary.report
        micro_p = "n/a" if report.micro_precision is None else f"{report.micro_precision:.4f}"
        print(
            f"{label}: micro precision {micro_p} recall {report.micro_recall:.4f} "
            f"F1 {report.micro_f1:.4f} over {len(report.per_item)} items"
        )
    manifest = {
        "tool_version": __version__,
        "paths": {
            "corpus": str(args.corpus),
            "dataset": str(args.dataset),
            "run": str(args.run),
        },
        "fingerprints": meta["fingerprints"],
        "provider_config": run.provider_config,
        "seeds": {"dataset": dataset.seed},
        "outputs": [p.name for p in paths],
    }
    manifest_path = out_dir / "manifest.json"
    with open(manifest_path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, ensure_ascii=False, indent=2)
        fh.write("\n")
    print(f"wrote {len(paths) + 1} files to {out_dir}")
    return 0


def _norm_cell(value: Optional[float], digits: int = 2) -> str:
    return "n/a" if value is None else f"{value:.{digits}f}"


def cmd_report(args: argparse.Namespace) -> int:
    metrics_dir = Path(args.metrics_dir)
    found = sorted(metrics_dir.glob("**/metrics.json"))
    if not found:
        raise UsageFailure(f"no metrics.json files under {metrics_dir}")
    verify_rows = []
    inquiry_rows = []
    blobs = []
    for path in found:
        with open(path, encoding="utf-8") as fh:
            blob = fh.read()
        blobs.append(blob)
        data = json.loads(blob)
        meta = data.get("meta", {})
        label = meta.get("provider", path.parent.name)
        if meta.get("protocol") == "verify":
            verify_rows.append((label, data.get("metrics", {}), data.get("bias", {})))
        elif meta.get("protocol") == "inquiry":
            inquiry_rows.append((label, data.get("scores", {}), data))
    digest = hashlib.sha256("".join(blobs).encode("utf-8")).hexdigest()
    lines = [
        f"<!-- tcmeval {__version__} sources={len(found)} sha256:{digest[:16]} -->",
        "",
        "# Evaluation report",
        "",
    ]
    if verify_rows:
        verify_rows.sort(key=lambda r: (-(r[1].get("accuracy") or 0.0), r[0]))
        lines += [
            "## Ingredient list verification",
            "",
            "| provider | accuracy | precision | recall | F1 | invalid | bias |",
            "| --- | --- | --- | --- | --- | --- | --- |",
        ]
        for label, metric, bias in verify_rows:
            lines.append(
                "| {} | {} | {} | {} | {} | {} | {} |".format(
                    label,
                    _norm_cell(metric.get("accuracy")),
                    _norm_cell(metric.get("precision")),
                    _norm_cell(metric.get("recall")),
                    _norm_cell(metric.get("f1")),
                    metric.get("invalid_count", 0),
                    _norm_cell(bias.get("bias")),
                )
            )
        lines.append("")
    if inquiry_rows:
        inquiry_rows.sort(key=lambda r: (-(r[1].get("micro_f1") or 0.0), r[0]))
        lines += [
            "## Direct ingredient inquiry",
            "",
            "| provider | micro precision | micro recall | micro F1 | macro F1 | repetition flags | literal flags |",
            "| --- | --- | --- | --- | --- | --- | --- |",
        ]
        for label, scores, data in inquiry_rows:
            lines.append(
                "| {} | {} | {} | {} | {} | {} | {} |".format(
                    label,
                    _norm_cell(scores.get("micro_precision"), 4),
                    _norm_cell(scores.get("micro_recall"), 4),
                    _norm_cell(scores.get("micro_f1"), 4),
                    _norm_cell(scores.get("macro_f1"), 4),
                    data.get("repetition_flagged", 0),
                    data.get("literal_flagged", 0),
                )
            )
        lines.append("")
    with open(args.out, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    print(f"wrote report over {len(found)} metric sets to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcmeval",
        description="Probe and score drug-ingredient knowledge of language models.",
    )
    parser.add_argument("--version", action="version", version=f"tcmeval {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    dataset_cmd = sub.add_parser("dataset", help="dataset operations")
    dataset_sub = dataset_cmd.add_subparsers(dest="dataset_command", required=True)
    build_cmd = dataset_sub.add_parser("build", help="build the perturbed T/F dataset")
    build_cmd.add_argument("--corpus", required=True, help="corpus JSONL (or .csv) path")
    build_cmd.add_argument("--seed", type=int, required=True, help="perturbation seed")
    build_cmd.add_argument("--out", required=True, help="output dataset JSONL path")
    build_cmd.set_defaults(func=cmd_dataset_build)

    run_cmd = sub.add_parser("run", help="run a protocol against a provider")
    run_cmd.add_argument("--dataset", required=True, help="dataset JSONL path")
    run_cmd.add_argument("--corpus", help="corpus path (required by corpus-backed providers)")
    run_cmd.add_argument("--provider-config", required=True, help="provider config JSON/TOML")
    run_cmd.add_argument("--protocol", required=True, choices=list(PROTOCOLS))
    run_cmd.add_argument("--out", required=True, help="run log JSONL path")
    run_cmd.add_argument("--concurrency", type=int, default=0, help="override worker count")
    run_cmd.add_argument("--lang", choices=["zh", "en"], default="zh", help="prompt language")
    run_cmd.add_argument("--resume", action="store_true", help="skip items already in the log")
    run_cmd.add_argument(
        "--max-error-rate",
        type=float,
        default=1.0,
        help="fail (exit 1) when the provider error rate exceeds this fraction",
    )
    run_cmd.set_defaults(func=cmd_run)

    score_cmd = sub.add_parser("score", help="score a run log")
    score_cmd.add_argument("--run", required=True, help="run log JSONL path")
    score_cmd.add_argument("--dataset", required=True, help="dataset JSONL path")
    score_cmd.add_argument("--corpus", required=True, help="corpus path")
    score_cmd.add_argument("--out-dir", required=True, help="directory for metrics files")
    score_cmd.add_argument("--label", help="provider label override for tables")
    score_cmd.add_argument(
        "--match-markers",
        action="store_true",
        help="require processing markers to match when comparing ingredient names",
    )
    score_cmd.add_argument(
        "--exclude-invalid",
        action="store_true",
        help="report Invalid answers separately instead of counting them as No",
    )
    score_cmd.set_defaults(func=cmd_score)

    report_cmd = sub.add_parser("report", help="render a markdown comparison report")
    report_cmd.add_argument("--metrics-dir", required=True, help="directory of score outputs")
    report_cmd.add_argument("--out", required=True, help="markdown output path")
    report_cmd.set_defaults(func=cmd_report)
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageFailure as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (CorpusError, DatasetError, ProviderConfigError, RunLogError, MetricsError, ValueError) as exc:
        # the domain error types all subclass ValueError; bad inputs map to 2
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
