from __future__ import annotations

import json
from pathlib import Path

from ragloop.cli import main
from ragloop.synthdata import write_demo_dataset


def _write_config(tmp_path, **extra) -> Path:
    corpus, queries = write_demo_dataset(tmp_path / "data", num_docs=120,
                                         num_queries=10, seed=1)
    lines = {
        "seed_corpus": str(corpus),
        "query_set": str(queries),
        "output_dir": str(tmp_path / "out"),
        "pipeline": "bm25",
        "sample_size": 10,
        "iterations": 1,
        "seed": 4,
        "offline": True,
        "generators": [{"name": "gen-a", "kind": "synthetic",
                        "accuracy": 0.9}],
    }
    lines.update(extra)
    path = tmp_path / "exp.yaml"
    path.write_text(json.dumps(lines))  # valid YAML subset
    return path


def test_cli_synth_writes_dataset(tmp_path, capsys):
    rc = main(["synth", "--out", str(tmp_path / "demo"), "--docs", "60",
               "--queries", "6", "--seed", "2"])
    assert rc == 0
    assert (tmp_path / "demo" / "corpus.jsonl").is_file()
    assert (tmp_path / "demo" / "queries.jsonl").is_file()
    assert "corpus.jsonl" in capsys.readouterr().out


def test_cli_validate_ok(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["validate", "--config", str(cfg)]) == 0
    assert "valid" in capsys.readouterr().out


def test_cli_validate_reports_problems(tmp_path, capsys):
    cfg = _write_config(tmp_path, pipeline="warp-drive")
    assert main(["validate", "--config", str(cfg)]) == 1
    assert "INVALID" in capsys.readouterr().err


def test_cli_baseline(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["baseline", "--config", str(cfg)]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["iteration"] == 0


def test_cli_run_and_report(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    assert (tmp_path / "out" / "summary.tsv").is_file()
    capsys.readouterr()
    assert main(["report", "--out", str(tmp_path / "out")]) == 0
    assert "series_accuracy.tsv" in capsys.readouterr().out


def test_cli_overrides_seed_and_out(tmp_path):
    cfg = _write_config(tmp_path)
    rc = main(["run", "--config", str(cfg), "--out", str(tmp_path / "other"),
               "--seed", "99"])
    assert rc == 0
    manifest = json.loads((tmp_path / "other" / "manifest.json").read_text())
    assert manifest["seed"] == 99


def test_cli_resume_completes_quietly(tmp_path, capsys):
    cfg = _write_config(tmp_path)
    assert main(["run", "--config", str(cfg)]) == 0
    capsys.readouterr()
    assert main(["resume", "--config", str(cfg)]) == 0
    assert "run complete" in capsys.readouterr().out


def test_cli_misinfo_flag(tmp_path):
    cfg = _write_config(tmp_path)
    rc = main(["run", "--config", str(cfg), "--misinfo",
               "--out", str(tmp_path / "mis")])
    assert rc == 0
    assert (tmp_path / "mis" / "injection" / "misinfo.jsonl").is_file()


def test_cli_error_paths(tmp_path, capsys):
    cfg = _write_config(tmp_path, query_set=str(tmp_path / "absent.jsonl"))
    assert main(["run", "--config", str(cfg)]) == 1
    assert "error:" in capsys.readouterr().err
    assert main(["report", "--out", str(tmp_path / "nothing-here")]) == 1
