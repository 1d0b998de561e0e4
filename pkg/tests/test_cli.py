"""Command line verbs and exit codes."""
import json

import pytest

from fedselectkd.cli import EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME, main

from helpers import cache_dir


@pytest.fixture(autouse=True)
def _env(monkeypatch):
    monkeypatch.setenv("FSKD_CACHE", str(cache_dir()))
    monkeypatch.delenv("FSKD_SEED", raising=False)


def _run(tmp_path, name, *extra):
    out = tmp_path / name
    code = main(["run", "--preset", "noniid_balanced", "--scale", "0.05", "--rounds", "1",
                 "--out", str(out), *extra])
    return code, out


def test_run_twice_identical(tmp_path):
    c1, a = _run(tmp_path, "a", "--strategy", "fedselectkd", "--seed", "7")
    c2, b = _run(tmp_path, "b", "--strategy", "fedselectkd", "--seed", "7")
    assert c1 == c2 == EXIT_OK
    assert (a / "metrics.jsonl").read_bytes() == (b / "metrics.jsonl").read_bytes()


def test_strategy_independent_bytes(tmp_path):
    _, a = _run(tmp_path, "a", "--strategy", "fedavg", "--seed", "7")
    _, b = _run(tmp_path, "b", "--strategy", "fedselectkd", "--seed", "7")
    ra = json.loads((a / "metrics.jsonl").read_text().splitlines()[0])
    rb = json.loads((b / "metrics.jsonl").read_text().splitlines()[0])
    assert ra["bytes_up"] == rb["bytes_up"] and ra["bytes_down"] == rb["bytes_down"]


def test_zero_rounds_report_only(tmp_path):
    code = main(["run", "--preset", "noniid_balanced", "--scale", "0.05", "--rounds", "0",
                 "--out", str(tmp_path / "z")])
    assert code == EXIT_OK
    assert (tmp_path / "z" / "metrics.jsonl").read_text() == ""
    assert (tmp_path / "z" / "report.json").exists()


def test_config_file_and_overrides(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"preset": "noniid_balanced", "scale": 0.05, "rounds": 0, "seed": 1}))
    monkeypatch.setenv("FSKD_SEED", "9")
    assert main(["run", str(cfg), "--out", str(tmp_path / "r"), "--set", "lam=0.5"]) == EXIT_OK
    resolved = json.loads((tmp_path / "r" / "config.resolved.json").read_text())
    assert resolved["seed"] == 9 and resolved["lam"] == 0.5 and resolved["rounds"] == 0
    assert main(["run", str(cfg), "--seed", "4", "--out", str(tmp_path / "s")]) == EXIT_OK
    assert json.loads((tmp_path / "s" / "config.resolved.json").read_text())["seed"] == 4


def test_invalid_config_field_message(tmp_path, capsys):
    cfg = tmp_path / "bad.json"
    cfg.write_text(json.dumps({"lam": 3, "strategy": "magic"}))
    assert main(["run", str(cfg)]) == EXIT_CONFIG
    err = capsys.readouterr().err
    assert "lam" in err and "strategy" in err
    assert main(["run", str(tmp_path / "missing.json")]) == EXIT_CONFIG
    (tmp_path / "broken.json").write_text("{")
    assert main(["run", str(tmp_path / "broken.json")]) == EXIT_CONFIG
    assert main(["run", "--set", "novalue"]) == EXIT_CONFIG


def test_bad_seed_env(monkeypatch):
    monkeypatch.setenv("FSKD_SEED", "abc")
    assert main(["run", "--rounds", "0"]) == EXIT_CONFIG


def test_resume_mismatch_exit_code(tmp_path, capsys):
    _, a = _run(tmp_path, "a")
    code = main(["run", "--preset", "noniid_balanced", "--scale", "0.05", "--rounds", "2", "--set", "lam=0.9",
                 "--out", str(a), "--resume"])
    assert code == EXIT_CONFIG
    assert "refusing" in capsys.readouterr().err


def test_compare_and_export(tmp_path, capsys):
    _, a = _run(tmp_path, "a")
    _, b = _run(tmp_path, "b", "--seed", "1")
    assert main(["compare", str(a), str(b), "--json", str(tmp_path / "cmp.json")]) == EXIT_OK
    text = capsys.readouterr().out
    assert "academic" in text and "delta" in text
    assert json.loads((tmp_path / "cmp.json").read_text())["seed_groups"]
    assert main(["compare", str(a), str(tmp_path / "none")]) == EXIT_RUNTIME
    assert "none" in capsys.readouterr().err
    assert main(["export-traces", str(a), "--out", str(tmp_path / "t.jsonl")]) == EXIT_OK
    lines = (tmp_path / "t.jsonl").read_text().splitlines()
    assert lines and {"round", "client", "entropy", "kd_applied", "class", "position"} <= set(json.loads(lines[0]))


def test_export_without_traces(tmp_path, capsys):
    _, a = _run(tmp_path, "a", "--set", "save_traces=false")
    assert main(["export-traces", str(a)]) == EXIT_RUNTIME
    assert "save_traces" in capsys.readouterr().err


def test_make_data(tmp_path):
    assert main(["make-data", "--preset", "iid_balanced", "--scale", "0.05", "--out", str(tmp_path / "d")]) == EXIT_OK
    assert sorted(p.name for p in (tmp_path / "d").glob("*.jsonl"))[:3] == [
        "client0.test.jsonl", "client0.train.jsonl", "client0.valid.jsonl"]
