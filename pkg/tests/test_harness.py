import hashlib
import json
import os

import pytest
from hypothesis import given, settings, strategies as hst

from locmoment.errors import ConfigError
from locmoment.harness import (
    KINDS, PARAMS, ExperimentConfig, ResultTable, _fmt, read_table, run, sweep, table_body, verify,
)

BS = {"kind": "bs", "model": {"half_width": 5, "disorder": 3.0}, "params": {"N": 4}, "seed": 7}


def _cfg(tmp_path, **kw):
    data = json.loads(json.dumps(BS)) | {"output": str(tmp_path)} | kw
    return ExperimentConfig.from_dict(data)


@given(hst.sampled_from(KINDS), hst.integers(0, 2**40), hst.integers(1, 8), hst.floats(0, 20))
@settings(max_examples=50)
def test_config_round_trip(kind, seed, workers, lam):
    cfg = ExperimentConfig.from_dict({"kind": kind, "model": {"half_width": 10, "disorder": lam}, "seed": seed,
                                      "workers": workers})
    text = cfg.to_json()
    again = ExperimentConfig.from_json(text)
    assert again.to_json() == text and again.sha256() == cfg.sha256()
    assert set(again.params) == set(PARAMS[kind])


def test_hash_is_sha256_of_canonical_json(tmp_path):
    cfg = _cfg(tmp_path)
    assert cfg.sha256() == hashlib.sha256(cfg.to_json().encode()).hexdigest()
    assert " " not in cfg.to_json()


@pytest.mark.parametrize("data", [
    {"kind": "nope"},
    {"kind": "bs", "colour": 1},
    {"kind": "bs", "params": {"bogus": 1}},
    {"kind": "bs", "model": {"half_width": 5, "bogus": 1}},
    {"kind": "bs", "seed": -1},
    {"kind": "bs", "workers": 0},
    {"model": {}},
])
def test_invalid_configs_rejected(data):
    with pytest.raises(ConfigError):
        ExperimentConfig.from_dict(data)


def test_invalid_json_rejected():
    with pytest.raises(ConfigError):
        ExperimentConfig.from_json("{not json")


def test_float_format_round_trips():
    for v in (0.1, 1 / 3, 1e-300, -2.5e17, 123456789.123456789):
        assert float(_fmt(v)) == v
    assert _fmt(True) == "1" and _fmt(None) == "" and _fmt(float("nan")) == "nan"


def test_row_schema_enforced():
    with pytest.raises(ConfigError):
        ResultTable("bs", ["a", "b"], [(1, 2, 3)])


def test_csv_layout(tmp_path):
    cfg = _cfg(tmp_path)
    table = run(cfg)
    path = os.path.join(tmp_path, "bs.csv")
    raw = open(path, newline="").read()
    assert raw.startswith("# locmoment ") and "\r\n" in raw and "\n" not in raw.replace("\r\n", "")
    header, cols, rows = read_table(path)
    assert header["kind"] == "bs" and header["config"] == cfg.to_json()
    assert cols == table.columns and len(rows) == 4
    assert table_body(path) == table.body()


def test_same_config_same_body(tmp_path):
    a = run(_cfg(tmp_path / "a"))
    b = run(_cfg(tmp_path / "b"))
    assert a.body() == b.body()
    assert run(_cfg(tmp_path / "c", seed=8)).body() != a.body()


def test_verify_accepts_and_detects_tampering(tmp_path):
    run(_cfg(tmp_path))
    assert verify(tmp_path) == [("bs.csv", True, "ok")]
    path = os.path.join(tmp_path, "bs.csv")
    text = open(path, newline="").read().replace('"disorder":3.0', '"disorder":4.0')
    with open(path, "w", newline="") as fh:
        fh.write(text)
    (name, ok, msg), = verify(tmp_path)
    assert not ok and "hash" in msg


def test_sweep_empty_values(tmp_path):
    t = sweep(_cfg(tmp_path), "model.disorder", [])
    assert t.rows == [] and t.body().count("\r\n") == 1
    assert t.columns[:2] == ["sweep_disorder", "child_seed"]


def test_sweep_groups_and_reproducibility(tmp_path):
    cfg = _cfg(tmp_path)
    a = sweep(cfg, "disorder", [1.0, 2.0, 3.0])
    b = sweep(cfg, "model.disorder", [1.0, 2.0, 3.0], write=False)
    groups = {}
    for r in a.rows:
        groups.setdefault(r[0], set()).add(r[1])
    assert sorted(groups) == [1.0, 2.0, 3.0]
    seeds = [s for g in groups.values() for s in g]
    assert len(seeds) == 3 and len(set(seeds)) == 3
    assert a.body() == b.body()


def test_sweep_rejects_non_numeric_axis(tmp_path):
    with pytest.raises(ConfigError):
        sweep(_cfg(tmp_path), "model.boundary", ["periodic"])
    with pytest.raises(ConfigError):
        sweep(_cfg(tmp_path), "nothing", [1])
