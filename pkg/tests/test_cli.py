import json

import pytest

from tcmeval.cli import main, provider_label
from tcmeval.corpus import sample_corpus_path
from tcmeval.dataset import load_dataset
from tcmeval.protocols import load_runlog


@pytest.fixture()
def corpus_path():
    return str(sample_corpus_path())


@pytest.fixture()
def built(tmp_path, corpus_path):
    """Dataset built from the bundled corpus at seed 42."""
    out = tmp_path / "dataset.jsonl"
    assert main(["dataset", "build", "--corpus", corpus_path, "--seed", "42", "--out", str(out)]) == 0
    return out


def _config(tmp_path, name, payload):
    path = tmp_path / name
    path.write_text(json.dumps(payload), encoding="utf-8")
    return str(path)


class TestDatasetBuild:
    def test_writes_mixed_and_subset_files(self, tmp_path, corpus_path, built, capsys):
        dataset = load_dataset(built)
        assert len(dataset.t_items()) == 18
        assert len(dataset.f_items()) == 18
        f_data = load_dataset(tmp_path / "dataset.F.jsonl")
        t_data = load_dataset(tmp_path / "dataset.T.jsonl")
        assert all(item.subset == "F" for item in f_data.items)
        assert all(item.subset == "T" for item in t_data.items)
        assert len(f_data.items) + len(t_data.items) == len(dataset.items)

    def test_rerun_is_byte_identical(self, tmp_path, corpus_path):
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        main(["dataset", "build", "--corpus", corpus_path, "--seed", "7", "--out", str(a)])
        main(["dataset", "build", "--corpus", corpus_path, "--seed", "7", "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_seed_changes_output(self, tmp_path, corpus_path):
        a = tmp_path / "a.jsonl"
        b = tmp_path / "b.jsonl"
        main(["dataset", "build", "--corpus", corpus_path, "--seed", "1", "--out", str(a)])
        main(["dataset", "build", "--corpus", corpus_path, "--seed", "2", "--out", str(b)])
        assert a.read_bytes() != b.read_bytes()

    def test_missing_corpus_is_usage_error(self, tmp_path, capsys):
        code = main(
            ["dataset", "build", "--corpus", str(tmp_path / "nope.jsonl"), "--seed", "1", "--out", str(tmp_path / "d.jsonl")]
        )
        assert code == 2
        assert "error:" in capsys.readouterr().err


class TestRun:
    def test_grounded_verify(self, tmp_path, corpus_path, built, capsys):
        config = _config(tmp_path, "grounded.json", {"kind": "grounded"})
        out = tmp_path / "run.jsonl"
        code = main(
            ["run", "--dataset", str(built), "--corpus", corpus_path,
             "--provider-config", config, "--protocol", "verify", "--out", str(out),
             "--concurrency", "4"]
        )
        assert code == 0
        assert "0 errors" in capsys.readouterr().out
        log = load_runlog(out)
        assert len(log.records) == 36
        assert log.protocol == "verify"

    def test_english_prompts(self, tmp_path, corpus_path, built):
        config = _config(tmp_path, "oracle.json", {"kind": "oracle"})
        out = tmp_path / "run_en.jsonl"
        code = main(
            ["run", "--dataset", str(built), "--corpus", corpus_path,
             "--provider-config", config, "--protocol", "verify", "--out", str(out),
             "--lang", "en"]
        )
        assert code == 0
        log = load_runlog(out)
        assert log.lang == "en"
        assert all(rec.prompt.startswith("Whether the drug") for rec in log.records)
        assert all(rec.parsed in ("Yes", "No") for rec in log.records)

    def test_resume_completes_truncated_log(self, tmp_path, corpus_path, built):
        config = _config(tmp_path, "grounded.json", {"kind": "grounded"})
        out = tmp_path / "run.jsonl"
        argv = ["run", "--dataset", str(built), "--corpus", corpus_path,
                "--provider-config", config, "--protocol", "verify", "--out", str(out)]
        assert main(argv) == 0
        lines = out.read_text(encoding="utf-8").splitlines()
        out.write_text("\n".join(lines[:-3]) + "\n", encoding="utf-8")
        assert main(argv + ["--resume"]) == 0
        log = load_runlog(out)
        assert sorted(rec.item_id for rec in log.records) == list(range(36))

    def test_invalid_provider_config(self, tmp_path, corpus_path, built, capsys):
        config = _config(tmp_path, "bad.json", {"kind": "psychic"})
        code = main(
            ["run", "--dataset", str(built), "--corpus", corpus_path,
             "--provider-config", config, "--protocol", "verify",
             "--out", str(tmp_path / "run.jsonl")]
        )
        assert code == 2
        assert "unknown provider kind" in capsys.readouterr().err

    def test_missing_corpus_for_corpus_backed_provider(self, tmp_path, built, capsys):
        config = _config(tmp_path, "oracle.json", {"kind": "oracle"})
        code = main(
            ["run", "--dataset", str(built), "--provider-config", config,
             "--protocol", "verify", "--out", str(tmp_path / "run.jsonl")]
        )
        assert code == 2
        assert "requires a corpus" in capsys.readouterr().err

    def test_wrong_corpus_fingerprint(self, tmp_path, corpus_path, built, capsys):
        other = tmp_path / "other.jsonl"
        other.write_text('{"name": "药甲", "ingredients": ["当归"]}\n', encoding="utf-8")
        config = _config(tmp_path, "oracle.json", {"kind": "oracle"})
        code = main(
            ["run", "--dataset", str(built), "--corpus", str(other),
             "--provider-config", config, "--protocol", "verify",
             "--out", str(tmp_path / "run.jsonl")]
        )
        assert code == 2
        assert "does not match" in capsys.readouterr().err

    def test_error_rate_threshold(self, tmp_path, corpus_path, built, capsys):
        # the name-reading baseline cannot answer verify questions at all
        config = _config(tmp_path, "literal.json", {"kind": "literal"})
        out = tmp_path / "run.jsonl"
        code = main(
            ["run", "--dataset", str(built), "--corpus", corpus_path,
             "--provider-config", config, "--protocol", "verify", "--out", str(out),
             "--max-error-rate", "0.5"]
        )
        assert code == 1
        assert "exceeds" in capsys.readouterr().err
        # the log is still written for inspection
        assert load_runlog(out).error_rate() == 1.0

    def test_error_rate_default_tolerates_all(self, tmp_path, corpus_path, built):
        config = _config(tmp_path, "literal.json", {"kind": "literal"})
        out = tmp_path / "run.jsonl"
        code = main(
            ["run", "--dataset", str(built), "--corpus", corpus_path,
             "--provider-config", config, "--protocol", "verify", "--out", str(out)]
        )
        assert code == 0


def _run_and_score(tmp_path, corpus_path, built, config_payload, protocol, sub, extra_score=()):
    config = _config(tmp_path, f"{sub}.json", config_payload)
    run_path = tmp_path / f"{sub}.run.jsonl"
    assert main(
        ["run", "--dataset", str(built), "--corpus", corpus_path,
         "--provider-config", config, "--protocol", protocol, "--out", str(run_path),
         "--concurrency", "4"]
    ) == 0
    out_dir = tmp_path / "scores" / sub
    assert main(
        ["score", "--run", str(run_path), "--dataset", str(built),
         "--corpus", corpus_path, "--out-dir", str(out_dir), *extra_score]
    ) == 0
    return out_dir


class TestScore:
    def test_verify_outputs(self, tmp_path, corpus_path, built, capsys):
        out_dir = _run_and_score(
            tmp_path, corpus_path, built, {"kind": "grounded"}, "verify", "grounded"
        )
        stdout = capsys.readouterr().out
        assert "accuracy 100.00" in stdout
        for name in ("metrics_table.csv", "bias.csv", "metrics.json", "manifest.json"):
            assert (out_dir / name).exists()
        data = json.loads((out_dir / "metrics.json").read_text(encoding="utf-8"))
        assert data["metrics"]["accuracy"] == 100.0
        assert data["confusion"] == {"tp": 18, "fp": 0, "fn": 0, "tn": 18}
        assert data["meta"]["protocol"] == "verify"
        manifest = json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["fingerprints"]["dataset"] == load_dataset(built).fingerprint()
        assert "metrics_table.csv" in manifest["outputs"]

    def test_inquiry_outputs(self, tmp_path, corpus_path, built, capsys):
        out_dir = _run_and_score(
            tmp_path, corpus_path, built, {"kind": "oracle"}, "inquiry", "oracle"
        )
        stdout = capsys.readouterr().out
        assert "micro precision 1.0000" in stdout
        for name in (
            "inquiry_items.csv",
            "herb_frequency.csv",
            "herb_prf_top.csv",
            "herb_prf_bottom.csv",
            "metrics.json",
            "manifest.json",
        ):
            assert (out_dir / name).exists()
        data = json.loads((out_dir / "metrics.json").read_text(encoding="utf-8"))
        assert data["scores"]["micro_f1"] == 1.0
        assert data["repetition_flagged"] == 0

    def test_label_override(self, tmp_path, corpus_path, built):
        out_dir = _run_and_score(
            tmp_path, corpus_path, built, {"kind": "grounded"}, "verify", "labeled",
            extra_score=("--label", "my-model"),
        )
        table = (out_dir / "metrics_table.csv").read_text(encoding="utf-8")
        assert "my-model" in table

    def test_dataset_fingerprint_mismatch(self, tmp_path, corpus_path, built, capsys):
        config = _config(tmp_path, "grounded.json", {"kind": "grounded"})
        run_path = tmp_path / "run.jsonl"
        main(["run", "--dataset", str(built), "--corpus", corpus_path,
              "--provider-config", config, "--protocol", "verify", "--out", str(run_path)])
        other = tmp_path / "other_dataset.jsonl"
        main(["dataset", "build", "--corpus", corpus_path, "--seed", "99", "--out", str(other)])
        code = main(
            ["score", "--run", str(run_path), "--dataset", str(other),
             "--corpus", corpus_path, "--out-dir", str(tmp_path / "s")]
        )
        assert code == 2
        assert "was produced from dataset" in capsys.readouterr().err

    def test_corpus_fingerprint_mismatch(self, tmp_path, corpus_path, built, capsys):
        config = _config(tmp_path, "grounded.json", {"kind": "grounded"})
        run_path = tmp_path / "run.jsonl"
        main(["run", "--dataset", str(built), "--corpus", corpus_path,
              "--provider-config", config, "--protocol", "verify", "--out", str(run_path)])
        other = tmp_path / "other.jsonl"
        other.write_text('{"name": "药甲", "ingredients": ["当归"]}\n', encoding="utf-8")
        code = main(
            ["score", "--run", str(run_path), "--dataset", str(built),
             "--corpus", str(other), "--out-dir", str(tmp_path / "s")]
        )
        assert code == 2
        assert "was built from corpus" in capsys.readouterr().err


class TestReport:
    def test_cross_provider_tables(self, tmp_path, corpus_path, built, capsys):
        _run_and_score(tmp_path, corpus_path, built, {"kind": "grounded"}, "verify", "grounded")
        _run_and_score(
            tmp_path, corpus_path, built,
            {"kind": "biased", "mode": "always_yes"}, "verify", "biased",
        )
        _run_and_score(tmp_path, corpus_path, built, {"kind": "oracle"}, "inquiry", "oracle")
        report_path = tmp_path / "report.md"
        code = main(
            ["report", "--metrics-dir", str(tmp_path / "scores"), "--out", str(report_path)]
        )
        assert code == 0
        text = report_path.read_text(encoding="utf-8")
        assert text.startswith("<!-- tcmeval")
        assert "## Ingredient list verification" in text
        assert "## Direct ingredient inquiry" in text
        # higher-accuracy provider sorts first
        assert text.index("| grounded |") < text.index("| biased[always_yes] |")
        assert "| 100.00 |" in text
        assert "| 50.00 |" in text

    def test_regeneration_is_byte_identical(self, tmp_path, corpus_path, built):
        _run_and_score(tmp_path, corpus_path, built, {"kind": "grounded"}, "verify", "grounded")
        a = tmp_path / "a.md"
        b = tmp_path / "b.md"
        main(["report", "--metrics-dir", str(tmp_path / "scores"), "--out", str(a)])
        main(["report", "--metrics-dir", str(tmp_path / "scores"), "--out", str(b)])
        assert a.read_bytes() == b.read_bytes()

    def test_empty_dir_is_usage_error(self, tmp_path, capsys):
        code = main(["report", "--metrics-dir", str(tmp_path), "--out", str(tmp_path / "r.md")])
        assert code == 2
        assert "no metrics.json" in capsys.readouterr().err


class TestProviderLabel:
    def test_labels(self):
        assert provider_label({"kind": "remote", "model_name": "glm-4"}) == "glm-4"
        assert provider_label({"kind": "rag", "inner": {"kind": "remote", "model_name": "m"}}) == "rag(m)"
        assert provider_label({"kind": "biased", "mode": "always_no"}) == "biased[always_no]"
        assert provider_label({"kind": "common_herb", "top_m": 7}) == "common_herb[m=7]"
        assert provider_label({"kind": "oracle"}) == "oracle"
