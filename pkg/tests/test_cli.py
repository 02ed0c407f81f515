import json
import os
import subprocess
import sys

import pytest

from locmoment import harness
from locmoment.cli import main
from locmoment.errors import NumericalError

BS = {"kind": "bs", "model": {"half_width": 5, "disorder": 3.0}, "params": {"N": 3}, "seed": 1}


@pytest.fixture
def config(tmp_path):
    path = tmp_path / "bs.json"
    path.write_text(json.dumps(BS))
    return str(path)


def test_run_and_verify(config, tmp_path):
    out = str(tmp_path / "out")
    assert main(["bs", "--config", config, "--out", out, "--seed", "5"]) == 0
    assert os.path.exists(os.path.join(out, "bs.csv"))
    assert main(["sweep", "--config", config, "--axis", "disorder", "--values", "1,2", "--out", out]) == 0
    assert main(["verify", "--out", out]) == 0


def test_config_errors_exit_two(config, tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(BS | {"kind": "nope"}))
    assert main(["bs", "--config", str(bad)]) == 2
    assert main(["criterion", "--config", config]) == 2                     # kind mismatch
    assert main(["bs", "--config", str(tmp_path / "missing.json")]) == 2
    assert main(["sweep", "--config", config, "--axis", "disorder", "--values", "a,b"]) == 2
    with pytest.raises(SystemExit) as exc:
        main(["frobnicate"])
    assert exc.value.code == 2


def test_numerical_failure_exits_three(config, tmp_path, monkeypatch):
    def boom(cfg):
        raise NumericalError("solver broke down")

    monkeypatch.setitem(harness.RUNNERS, "bs", boom)
    assert main(["bs", "--config", config, "--out", str(tmp_path)]) == 3


def test_verify_failure_exit(config, tmp_path):
    out = tmp_path / "out"
    assert main(["bs", "--config", config, "--out", str(out)]) == 0
    path = out / "bs.csv"
    path.write_bytes(path.read_bytes().replace(b'"seed":1', b'"seed":2'))
    assert main(["verify", "--out", str(out)]) == 2


def test_console_entry_point(config, tmp_path):
    r = subprocess.run([sys.executable, "-m", "locmoment.cli", "bs", "--config", config, "--out", str(tmp_path)],
                       capture_output=True, text=True)
    assert r.returncode == 0 and "rows written" in r.stdout
