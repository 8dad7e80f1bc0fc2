import csv
import io
import json
import subprocess
import sys

import numpy as np
import pytest

from lait.cli import run_cli
from lait.model import load_weights

SMALL = ["--layers", "2", "--d-model", "8", "--heads", "2", "--d-ff", "8"]


def write_jsonl(path, rows):
    path.write_text("".join(json.dumps(r) + "\n" for r in rows))
    return path


@pytest.fixture
def corpus(tmp_path):
    return write_jsonl(tmp_path / "corpus.jsonl", [
        {"task": "mnli", "fields": {"premise": "a man sleeps", "hypothesis": "someone rests"},
         "label": "entailment"},
        {"task": "mnli", "fields": {"premise": "a man sleeps", "hypothesis": "nobody rests"},
         "label": "contradiction"},
        {"task": "mnli", "fields": {"premise": "the cat sat", "hypothesis": "someone rests"}},
    ])


@pytest.fixture
def lengths(tmp_path):
    return write_jsonl(tmp_path / "lengths.jsonl", [
        {"lengths": [16, 31], "mult": 1, "digests": ["a", "b"]},
        {"lengths": [16, 31], "mult": 1, "digests": ["a", "c"]},
    ])


def read_csv(text):
    return list(csv.DictReader(io.StringIO(text)))


class TestCost:
    def test_single_p(self, lengths, capsys):
        assert run_cli(["cost", "--lengths", str(lengths), "--p", "9"]) == 0
        (row,) = read_csv(capsys.readouterr().out)
        assert row["P"] == "9" and row["ops_total"] == str(2 * 17580)
        assert row["flops"] == str(2 * 54_005_760)
        assert float(row["ratio_full"]) == pytest.approx(17580 / 26508, abs=1e-6)
        assert float(row["ratio_cached"]) < float(row["ratio_full"])

    def test_sweep_to_file(self, lengths, tmp_path, capsys):
        out = tmp_path / "sweep.csv"
        assert run_cli(["cost", "--lengths", str(lengths), "--sweep-p", "--output", str(out)]) == 0
        rows = read_csv(out.read_text())
        assert [int(r["P"]) for r in rows] == list(range(13))
        manifest = json.loads((tmp_path / "sweep.csv.manifest.json").read_text())
        assert manifest["command"] == "cost" and manifest["config"]["n_layers"] == 12
        assert {"config_digest", "seed", "tool_version", "flags"} <= set(manifest)

    def test_config_file_and_flag_precedence(self, lengths, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"layers": 6, "p": 2}))
        assert run_cli(["cost", "--lengths", str(lengths), "--config", str(cfg)]) == 0
        (row,) = read_csv(capsys.readouterr().out)
        assert row["P"] == "2" and row["ops_total"] == str(2 * (2 * (256 + 961) + 4 * 47 * 47))
        assert run_cli(["cost", "--lengths", str(lengths), "--config", str(cfg), "--p", "6"]) == 0
        (row,) = read_csv(capsys.readouterr().out)
        assert row["P"] == "6"

    def test_bad_record(self, tmp_path, capsys):
        bad = write_jsonl(tmp_path / "bad.jsonl", [{"lengths": [3]}, {"lengths": [0]}])
        assert run_cli(["cost", "--lengths", str(bad)]) == 2
        assert ":2" in capsys.readouterr().err

    def test_p_out_of_range(self, lengths, capsys):
        assert run_cli(["cost", "--lengths", str(lengths), "--p", "13"]) == 2


class TestUsage:
    def test_unknown_flag(self, capsys):
        assert run_cli(["cost", "--bogus"]) == 2

    def test_missing_file(self, tmp_path, capsys):
        assert run_cli(["stats", "--input", str(tmp_path / "nope.jsonl")]) == 2

    def test_malformed_json(self, tmp_path, capsys):
        p = tmp_path / "x.jsonl"
        p.write_text('{"task": "raw", "fields": ["a"]}\n{not json\n')
        assert run_cli(["stats", "--input", str(p)]) == 2
        assert "x.jsonl:2" in capsys.readouterr().err

    def test_missing_template_field(self, tmp_path, capsys):
        p = write_jsonl(tmp_path / "x.jsonl", [{"task": "mnli", "fields": {"premise": "p"}}])
        assert run_cli(["stats", "--input", str(p)]) == 2
        assert "hypothesis" in capsys.readouterr().err

    def test_bad_heads(self, corpus, capsys):
        assert run_cli(["encode", "--input", str(corpus), "--d-model", "10", "--heads", "3"]) == 2

    def test_version(self, capsys):
        assert run_cli(["--version"]) == 0
        assert "lait" in capsys.readouterr().out

    def test_console_script(self):
        r = subprocess.run([sys.executable, "-m", "lait.cli", "--help"], capture_output=True, text=True)
        assert r.returncode == 0 and "verify" in r.stdout


class TestStats:
    def test_summary_and_lengths_file(self, corpus, tmp_path, capsys):
        out = tmp_path / "lengths.jsonl"
        assert run_cli(["stats", "--input", str(corpus), "--p", "9", "--output", str(out)]) == 0
        summary = json.loads(capsys.readouterr().out)
        assert summary["mnli"]["examples"] == 3 and summary["mnli"]["segments"] == [2]
        assert summary["cost"]["ratio_cached"] < summary["cost"]["ratio_full"] < 1
        recs = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(recs) == 3 and recs[0]["digests"][1] == recs[1]["digests"][1]


class TestEncode:
    def test_outputs_and_cache(self, corpus, tmp_path, capsys):
        out = tmp_path / "enc.jsonl"
        cache_dir = tmp_path / "cache"
        args = ["encode", "--input", str(corpus), "--p", "1", "--cache-dir", str(cache_dir), "--output", str(out),
                *SMALL]
        assert run_cli(args) == 0
        preds = [json.loads(line) for line in out.read_text().splitlines()]
        assert len(preds) == 3 and preds[0]["prediction"] in ("entailment", "neutral", "contradiction")
        manifest = json.loads((tmp_path / "enc.jsonl.manifest.json").read_text())
        assert manifest["cache"]["hits"] == 2  # repeated premise and hypothesis
        arrays = np.load(tmp_path / "enc.npz")
        assert arrays["example_000000"].shape[1] == 8
        first = arrays["example_000000"].copy()
        assert run_cli(args) == 0
        manifest = json.loads((tmp_path / "enc.jsonl.manifest.json").read_text())
        assert manifest["cache"]["misses"] == 0
        np.testing.assert_array_equal(np.load(tmp_path / "enc.npz")["example_000000"], first)

    def test_corrupt_weights(self, corpus, tmp_path, capsys):
        bad = tmp_path / "w.laitw"
        bad.write_bytes(b"LAITW\x01")
        assert run_cli(["encode", "--input", str(corpus), "--weights", str(bad)]) == 2
        assert "truncated" in capsys.readouterr().err


class TestTrain:
    def test_small_run(self, tmp_path, capsys):
        out = tmp_path / "run.csv"
        args = ["train", "--steps", "6", "--eval-every", "3", "--n-train", "32", "--n-eval", "16",
                "--batch-size", "8", "--p", "1", "--output", str(out), *SMALL]
        assert run_cli(args) == 0
        rows = read_csv(out.read_text())
        assert [r["step"] for r in rows] == [str(i) for i in range(1, 7)]
        assert rows[2]["eval_accuracy"] != "" and rows[0]["eval_accuracy"] == ""
        manifest = json.loads((tmp_path / "run.csv.manifest.json").read_text())
        assert manifest["flags"]["steps"] == 6 and manifest["config"]["n_parallel"] == 1
        w = load_weights(tmp_path / "run.laitw")
        assert w.head.labels == ("same", "diff")
        assert run_cli(args) == 0
        assert read_csv(out.read_text()) == rows

    def test_config_file_sets_subcommand_options(self, tmp_path, capsys):
        cfg = tmp_path / "c.json"
        cfg.write_text(json.dumps({"steps": 2, "n-train": 8, "n-eval": 4, "batch-size": 4, "eval-every": 1}))
        out = tmp_path / "run.csv"
        assert run_cli(["train", "--config", str(cfg), "--output", str(out), *SMALL]) == 0
        assert len(read_csv(out.read_text())) == 2

    def test_divergence_exit_code(self, capsys):
        args = ["train", "--steps", "2", "--n-train", "8", "--n-eval", "4", "--batch-size", "4", "--lr", "nan", *SMALL]
        assert run_cli(args) == 1
        assert "non-finite" in capsys.readouterr().err


class TestBench:
    def test_cartesian(self, tmp_path, capsys):
        out = tmp_path / "bench.json"
        args = ["bench", "cartesian", "--left", "3x4", "--right", "5x6", "--cache", "--reps", "1",
                "--output", str(out), *SMALL, "--p", "1"]
        assert run_cli(args) == 0
        report = json.loads(out.read_text())
        assert report["uncached"]["ops_match"] and report["cached"]["ops_match"]
        assert report["cached"]["outputs_identical"]
        a = report["analytic"]
        assert a["uncached_ops"] == 15 * (16 + 36 + 100)
        assert a["cached_ops"] == 3 * 16 + 5 * 36 + 15 * 100

    def test_replay(self, corpus, capsys):
        args = ["bench", "replay", "--input", str(corpus), "--reps", "1", "--cache-budget-bytes", "100000",
                *SMALL, "--p", "1"]
        assert run_cli(args) == 0
        report = json.loads(capsys.readouterr().out)
        assert report["cached"]["outputs_identical"]


def test_verify_quick(tmp_path, capsys):
    out = tmp_path / "verify.txt"
    assert run_cli(["verify", "--quick", "--output", str(out)]) == 0
    text = out.read_text()
    assert "ALL PASS" in text and text.count("[PASS]") >= 9
