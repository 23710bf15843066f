import json
import subprocess
import sys

import pytest

from caap.cli import build_parser, main

SMALL = "monte_carlo_runs: 2\nsecurity_runs: 2\ntrace: {duration_s: 6}\n"


@pytest.fixture
def cfg_path(tmp_path):
    p = tmp_path / "small.yaml"
    p.write_text(SMALL)
    return p


def test_parser_exposes_the_four_subcommands():
    parser = build_parser()
    for cmd in ("run", "sweep-eps", "security", "calibrate"):
        assert parser.parse_args([cmd]).command == cmd
    with pytest.raises(SystemExit):
        parser.parse_args(["run", "--selector", "Nope"])


def test_run_writes_reports_and_prints_checks(cfg_path, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--config", str(cfg_path), "--out", str(out), "--selector", "APMOEA",
                 "--selector", "StaticHash", "--format", "both"])
    text = capsys.readouterr().out
    assert "[PASS] StaticHash: no switches" in text
    assert (out / "report.json").exists() and (out / "latency.csv").exists()
    data = json.loads((out / "report.json").read_text())
    assert [r["selector"] for r in data["latency"]] == ["APMOEA", "StaticHash"]
    assert code in (0, 1)
    assert ("[FAIL]" in text) == (code == 1)


def test_run_seed_override_changes_output(cfg_path, tmp_path, capsys):
    main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "a"), "--selector", "APMOEA", "--format", "json"])
    main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "b"), "--selector", "APMOEA", "--format", "json",
          "--seed", "5"])
    main(["run", "--config", str(cfg_path), "--out", str(tmp_path / "c"), "--selector", "APMOEA", "--format", "json"])
    a, b, c = ((tmp_path / d / "report.json").read_bytes() for d in "abc")
    assert a == c and a != b


def test_sweep_single_point(cfg_path, tmp_path, capsys):
    code = main(["sweep-eps", "--config", str(cfg_path), "--out", str(tmp_path), "--eps", "0.1", "--format", "csv"])
    assert code == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0] == "epsilon,switches_per_60s"
    assert len(lines) == 2 and lines[1].startswith("0.1,")


def test_security_passes(cfg_path, tmp_path, capsys):
    code = main(["security", "--config", str(cfg_path), "--out", str(tmp_path), "--format", "csv"])
    text = capsys.readouterr().out
    assert code == 0, text
    assert "[FAIL]" not in text
    assert (tmp_path / "attacks.csv").exists() and (tmp_path / "attempts.csv").exists()


def test_calibrate_reports_ordering(tmp_path, capsys):
    code = main(["calibrate", "--out", str(tmp_path), "--format", "json"])
    text = capsys.readouterr().out
    assert code == 0
    assert "first ordering inversion at magnitude 0.31" in text
    assert "ordering" in json.loads((tmp_path / "report.json").read_text())


def test_bad_config_exits_with_two(tmp_path, capsys):
    p = tmp_path / "bad.yaml"
    p.write_text("monte_carlo_runs: 0\n")
    assert main(["run", "--config", str(p)]) == 2
    assert "monte_carlo_runs" in capsys.readouterr().err


def test_module_entry_point(tmp_path):
    r = subprocess.run([sys.executable, "-m", "caap.cli", "calibrate", "--out", str(tmp_path), "--format", "csv"],
                       capture_output=True, text=True)
    assert r.returncode == 0, r.stderr
    assert "[PASS]" in r.stdout
