import json
import subprocess
import sys

import pytest

from apsafety.cli import main


def test_run_writes_reports(tmp_path, capsys):
    assert main(["run", "--scenario", "S4", "--seed", "7", "--out", str(tmp_path)]) == 0
    assert {p.name for p in tmp_path.iterdir()} == {"verdicts.log", "bg_trace.csv", "report.json"}
    assert "blocked=1" in capsys.readouterr().out


def test_output_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    main(["run", "--scenario", "S2", "--seed", "3", "--out", str(a)])
    main(["run", "--scenario", "S2", "--seed", "3", "--out", str(b)])
    for name in ("verdicts.log", "bg_trace.csv", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()


def test_strict_exit_codes():
    assert main(["run", "--scenario", "S1", "--strict"]) == 1
    assert main(["run", "--script", "/dev/null/none"]) == 2


def test_unknown_scenario_lists_available(capsys):
    assert main(["run", "--scenario", "S42"]) == 2
    err = capsys.readouterr().err
    assert "S42" in err and all(n in err for n in ("S1", "S2", "S3", "S4", "S5"))


def test_missing_files_fail_at_parse_time(capsys):
    assert main(["run", "--scenario", "S1", "--patient", "nope.json"]) == 2
    assert "no such file" in capsys.readouterr().err


def test_bad_config_file(tmp_path):
    bad = tmp_path / "rules.json"
    bad.write_text(json.dumps([{"id": "x", "kind": "max_bolus", "units": -1}]))
    assert main(["run", "--scenario", "S1", "--rules", str(bad)]) == 2
    bad.write_text("{not json")
    assert main(["run", "--scenario", "S1", "--rules", str(bad)]) == 2


def test_subcommand_required():
    assert main([]) == 2


def test_static_check_default(capsys):
    assert main(["static-check", "--rules", "default"]) == 0
    out = capsys.readouterr().out
    for rid in ("sensor-error", "warn-high", "warn-low"):
        line = next(l for l in out.splitlines() if l.startswith(rid))
        assert line.split()[1] == "x"  # Valid column
    assert "Timeout" in out


def test_static_check_all_and_unknown_firmware(capsys):
    assert main(["static-check", "--firmware", "all"]) == 0
    out = capsys.readouterr().out
    assert out.count("static check:") == 4 and "counterexample bg=-1" in out
    assert main(["static-check", "--firmware", "bogus"]) == 2
    assert main(["static-check", "--lo", "10", "--hi", "0"]) == 2


def test_dump_config_round_trips(tmp_path, capsys):
    assert main(["dump-config", "--out", str(tmp_path)]) == 0
    args = ["--patient", str(tmp_path / "patient.json"), "--therapy", str(tmp_path / "therapy.json"),
            "--rules", str(tmp_path / "rules.json")]
    capsys.readouterr()
    assert main(["run", "--scenario", "S1"] + args) == 0
    with_files = capsys.readouterr().out
    assert main(["run", "--scenario", "S1"]) == 0
    assert capsys.readouterr().out == with_files


def test_list_scenarios(capsys):
    assert main(["list-scenarios"]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 5


def test_run_all(tmp_path):
    assert main(["run", "--all", "--out", str(tmp_path)]) == 0
    assert sorted(p.name for p in tmp_path.iterdir()) == ["S1", "S2", "S3", "S4", "S5"]


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "apsafety", "list-scenarios"], capture_output=True, text=True)
    assert proc.returncode == 0 and "S5" in proc.stdout
