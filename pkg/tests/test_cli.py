import subprocess
import sys

import pytest
import yaml

from hamdesign.cli import EXIT_BUDGET, EXIT_CONFIG, EXIT_NUMERICAL, EXIT_OK, main

from conftest import small_planted_dict


def _write(tmp_path, d, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(d))
    return str(path)


def test_validate_config_ok(tmp_path, capsys):
    assert main(["validate-config", "--config", _write(tmp_path, small_planted_dict())]) == EXIT_OK
    assert "7 operators, 6 free parameters" in capsys.readouterr().out


def test_recover_ok_writes_outputs(tmp_path, capsys):
    out = tmp_path / "run"
    code = main(["recover", "--config", _write(tmp_path, small_planted_dict()), "--out", str(out), "--seed", "4"])
    assert code == EXIT_OK
    assert (out / "report.json").exists() and (out / "trace.csv").exists()
    assert "overlap 1.0000000000" in capsys.readouterr().out


@pytest.mark.parametrize("patch", [{"colour": 1}, {"model": {"name": "hubbard"}},
                                   {"reference": {"source": "planted", "support": ["QQ"]}}])
def test_config_errors_exit_2(tmp_path, patch, capsys):
    assert main(["recover", "--config", _write(tmp_path, small_planted_dict(**patch))]) == EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_config_file_exits_2(tmp_path):
    assert main(["validate-config", "--config", str(tmp_path / "nope.yaml")]) == EXIT_CONFIG


def test_bad_threads_exits_2(tmp_path):
    assert main(["recover", "--config", _write(tmp_path, small_planted_dict()), "--threads", "0"]) == EXIT_CONFIG


def test_numerical_failure_exits_3(tmp_path, capsys):
    d = small_planted_dict(reference={"source": "planted", "support": ["ZZ"], "max_attempts": 2})
    assert main(["recover", "--config", _write(tmp_path, d), "--out", str(tmp_path / "o")]) == EXIT_NUMERICAL
    assert "numerical failure" in capsys.readouterr().err


def test_budget_exhausted_exits_4(tmp_path):
    d = small_planted_dict(optimizer={"max_evals": 20, "warmup_iters": 0})
    assert main(["recover", "--config", _write(tmp_path, d), "--out", str(tmp_path / "o")]) == EXIT_BUDGET


def test_threads_give_identical_report(tmp_path):
    cfg = _write(tmp_path, small_planted_dict())
    assert main(["recover", "--config", cfg, "--out", str(tmp_path / "a")]) == EXIT_OK
    assert main(["recover", "--config", cfg, "--out", str(tmp_path / "b"), "--threads", "3"]) == EXIT_OK
    ra = yaml.safe_load((tmp_path / "a" / "report.json").read_text())
    rb = yaml.safe_load((tmp_path / "b" / "report.json").read_text())
    assert ra["parameters"] == rb["parameters"] and ra["final_loss"] == rb["final_loss"]


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "hamdesign", "validate-config", "--config",
                           _write(tmp_path, small_planted_dict())], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("ok:")
    proc = subprocess.run([sys.executable, "-m", "hamdesign", "fly", "--config", "x"], capture_output=True)
    assert proc.returncode == 2  # argparse usage error
