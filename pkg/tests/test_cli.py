"""End-to-end CLI subcommand checks in temporary directories."""

import json
import os

import pytest

from weavepe.cli import main


def run_cli(args):
    return main([str(a) for a in args])


def test_plan_echoes_symbols(tmp_path, capsys):
    assert run_cli(["plan", "--I", 9000, "--T", 4096]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["N"] == 2 and doc["C"] == 2796
    assert doc["F"] == 100 and doc["L"] == 512


def test_gen_positions_golden_row(tmp_path):
    out = tmp_path / "o"
    assert run_cli(["gen-positions", "--scheme", "stair", "--n", 10, "--N", 4, "--E", 2, "--out", out]) == 0
    rows = (out / "positions_stair_n10.csv").read_text().strip().splitlines()
    assert rows[-1] == "7,6,6,5,5,4,3,2,1,0"
    doc = json.loads((out / "positions_stair_n10.json").read_text())
    assert doc["N"] == 4 and doc["E"] == 2


def test_gen_positions_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert run_cli(["gen-positions", "--scheme", "rerope", "--n", 12, "--N", 4, "--out", out]) == 0
    assert (a / "positions_rerope_n12.csv").read_bytes() == (b / "positions_rerope_n12.csv").read_bytes()


def test_invalid_combination_emits_error_record(tmp_path, capsys):
    code = run_cli(["gen-positions", "--scheme", "rerope", "--n", 8, "--E", 2, "--out", tmp_path])
    assert code != 0
    err = json.loads(capsys.readouterr().err)
    assert "E applies" in err["error"]


def test_verify_theory_crossing(tmp_path, capsys):
    out = tmp_path / "t"
    assert run_cli(["verify-theory", "--theorem", "1", "--M", 8, "--H", 0, "--t-max", 32, "--out", out]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["crossing"] == 8
    csv = (out / "threshold_theorem1_M8.csv").read_text().splitlines()
    assert csv[0] == "t,observed,predicted,verdict"
    assert len(csv) == 33


def test_verify_theory_corollary(tmp_path, capsys):
    out = tmp_path / "t"
    code = run_cli(
        ["verify-theory", "--theorem", "corollary", "--M", 8, "--N", 2, "--E", 5, "--t-max", 20, "--out", out]
    )
    assert code == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["agrees_with_closed_form"] is True


def test_run_report_deterministic(tmp_path, capsys):
    args = [
        "run", "--random-tokens", 300, "--T", 64, "--N", 32, "--E", 4,
        "--F", 8, "--L", 16, "--M-max", 8, "--d", 8, "--max-new", 4, "--seed", 5,
    ]
    a, b = tmp_path / "a", tmp_path / "b"
    assert run_cli(args + ["--out", a]) == 0
    assert run_cli(args + ["--out", b]) == 0
    capsys.readouterr()
    assert (a / "run_report.json").read_bytes() == (b / "run_report.json").read_bytes()
    doc = json.loads((a / "run_report.json").read_text())
    assert len(doc["generated_ids"]) == 4
    assert doc["report"]["fallback"] is False


def test_run_with_text_input(tmp_path, capsys):
    src = tmp_path / "prompt.txt"
    src.write_text("the cat sat on the mat and looked at the dog " * 12)
    out = tmp_path / "o"
    args = [
        "run", "--input", src, "--T", 32, "--N", 16, "--E", 2, "--F", 4, "--L", 8,
        "--M-max", 4, "--d", 8, "--max-new", 3, "--out", out,
    ]
    assert run_cli(args) == 0
    capsys.readouterr()
    doc = json.loads((out / "run_report.json").read_text())
    assert isinstance(doc["generated_text"], str)
    assert len(doc["generated_text"].split()) == 3


def test_passkey_corpus_file(tmp_path, capsys):
    out = tmp_path / "p"
    assert run_cli(["passkey", "--lengths", "1024,2048", "--per-length", 2, "--seed", 3, "--out", out]) == 0
    capsys.readouterr()
    lines = (out / "passkey_corpus.jsonl").read_text().strip().splitlines()
    assert len(lines) == 4
    doc = json.loads(lines[0])
    assert doc["text"].startswith("There is an important info")


def test_bench_writes_table(tmp_path, capsys):
    out = tmp_path / "b"
    assert run_cli(["bench", "--methods", "vanilla", "--n-list", "32,64", "--out", out]) == 0
    capsys.readouterr()
    table = (out / "bench.csv").read_text().splitlines()
    assert len(table) == 3


def test_env_override_applies(tmp_path, capsys, monkeypatch):
    monkeypatch.setenv("WEAVEPE_T", "2048")
    assert run_cli(["plan", "--I", 9000]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["T"] == 2048


def test_config_file_fills_defaults(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"T": 4096, "F": 100, "L": 512, "M_max": 200}))
    assert run_cli(["plan", "--I", 5000, "--config", cfg, "--T", 4096]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["C"] == 2194
