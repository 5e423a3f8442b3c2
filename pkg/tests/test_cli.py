import json
import math

import pytest
from hypothesis import given, strategies as st

from phlab.cli import (EXIT_CONFIG, EXIT_FAIL, EXIT_INFEASIBLE, EXIT_OK, ExperimentConfig, dumps, main,
                       pop_timings)
from phlab.models import default_instance


def _config(tmp_path, doc, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return str(p)


def _read(out, name):
    return json.loads((out / name).read_text())


# ---------------------------------------------------------------- serialization

@given(st.floats(allow_nan=False, allow_infinity=False))
def test_floats_round_trip_exactly(x):
    assert json.loads(dumps({"x": x}))["x"] == x


def test_timings_move_out_of_reports():
    doc = {"a": 1, "timings": {"t": 0.5}, "sub": {"timings": {"u": 1.0}, "b": [{"timings": {"v": 2}}]}}
    sink = pop_timings(doc)
    assert doc == {"a": 1, "sub": {"b": [{}]}}
    assert sink == {"t": 0.5, "sub.u": 1.0, "sub.b.v": 2}


# ---------------------------------------------------------------- config

def test_defaults_load_without_a_file(monkeypatch):
    monkeypatch.delenv("PHLAB_WORKERS", raising=False)
    cfg = ExperimentConfig.load()
    assert cfg.seed == 0 and cfg.workers == 1
    assert cfg.model().digest() == default_instance().digest()


def test_workers_fall_back_to_the_environment(monkeypatch):
    monkeypatch.setenv("PHLAB_WORKERS", "3")
    assert ExperimentConfig.load().workers == 3
    assert ExperimentConfig.load(workers=2).workers == 2


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"seed": "zero"},
    {"mode": "loose"},
    {"model": {"kind": "hyperbolic"}},
    {"schedule": 3},
])
def test_bad_configs_exit_4(tmp_path, doc):
    assert main(["certify", "--config", _config(tmp_path, doc), "--out", str(tmp_path / "o")]) == EXIT_CONFIG


def test_missing_config_exits_4(tmp_path):
    assert main(["certify", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bad_worker_env_exits_4(tmp_path, monkeypatch):
    monkeypatch.setenv("PHLAB_WORKERS", "many")
    assert main(["certify", "--out", str(tmp_path)]) == EXIT_CONFIG


def test_census_rejects_non_power_of_two_fibers(tmp_path):
    cfg = _config(tmp_path, {"census": {"fibers": [12], "models": {"config": "config"}}})
    assert main(["census", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_CONFIG


# ---------------------------------------------------------------- certify

def test_certify_default_passes_and_is_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["certify", "--out", str(a)]) == EXIT_OK
    assert main(["certify", "--out", str(b)]) == EXIT_OK
    assert (a / "certificate.json").read_bytes() == (b / "certificate.json").read_bytes()
    cert = _read(a, "certificate.json")
    assert cert["passed"] and all(m > 0 for m in cert["margins"].values())
    man = _read(a, "manifest.json")
    assert set(man["files"]) == {"certificate.json"} and "certify" in man["timings"]


def test_certify_identity_fails_with_a_witness(tmp_path, capsys):
    cfg = _config(tmp_path, {"model": {"kind": "linear", "A": [[1, 0], [0, 1]]}})
    assert main(["certify", "--config", cfg, "--out", str(tmp_path / "o")]) == EXIT_FAIL
    doc = _read(tmp_path / "o", "certificate.json")
    assert doc["passed"] is False and doc["witness"]
    assert "witness" in capsys.readouterr().err


# ---------------------------------------------------------------- schedule

def test_strict_schedule_is_computed_then_refused(tmp_path, capsys):
    out = tmp_path / "s"
    assert main(["schedule", "--mode", "strict", "--out", str(out)]) == EXIT_INFEASIBLE
    doc = _read(out, "schedule.json")
    assert doc["geometry"]["feasible"] is False
    assert "infeasible eta_hat" in capsys.readouterr().err
    assert all(math.isfinite(v) for v in doc["schedule"]["logs"].values())
    checks = doc["schedule"]["checks"]
    # the literal counting inequality is an equality at u = 1 and is reported only
    enforced = {k: v for k, v in checks.items() if not k.startswith("counting_literal")}
    assert all(enforced.values()) and checks["counting_literal_gap"] > -1e-12


def test_strict_perturb_exits_3(tmp_path):
    assert main(["perturb", "--mode", "strict", "--out", str(tmp_path)]) == EXIT_INFEASIBLE


# ---------------------------------------------------------------- perturb and verify at kappa = 0

def test_kappa_zero_perturb_returns_the_input_model(tmp_path):
    cfg = _config(tmp_path, {"schedule": {"kappa": 0.0}})
    out = tmp_path / "p"
    assert main(["perturb", "--config", cfg, "--out", str(out)]) == EXIT_OK
    doc = _read(out, "model.json")
    assert doc["patches"] == [] and doc["base"] == default_instance().to_doc()


def test_unperturbed_verify_fails_every_pair(tmp_path):
    cfg = _config(tmp_path, {"schedule": {"kappa": 0.0}, "verify": {"pairs": 2, "probe_pairs": 2}})
    out = tmp_path / "v"
    assert main(["verify", "--config", cfg, "--out", str(out)]) == EXIT_FAIL
    doc = _read(out, "verify.json")
    assert doc["aggregate"]["witnesses"] == 0 and len(doc["failures"]) == 2
    assert doc["baseline"]["sup"] <= 1e-6 and doc["robustness"] is None
    assert "timings" not in json.dumps(doc)


# ---------------------------------------------------------------- census

def test_small_census_counts(tmp_path):
    cfg = _config(tmp_path, {"census": {"fibers": [8, 16], "horizontal": 8,
                                        "models": {"product": "config",
                                                   "skew3": {"kind": "skew", "A": [[2, 1], [1, 1]],
                                                             "eps": 0.2, "k": 3}}}})
    out = tmp_path / "c"
    assert main(["census", "--config", cfg, "--out", str(out)]) == EXIT_OK
    doc = _read(out, "census.json")
    assert doc["product"]["terminal_counts"] == [8, 16]
    assert doc["skew3"]["terminal_counts"] == [3, 3]
    assert doc["product"]["sweep"][0]["entropy"]["k0"] == 2
    lines = (out / "census_volumes.csv").read_text().splitlines()
    assert lines[0] == "model,fiber,class,volume,trapping,saturated" and len(lines) == 1 + 8 + 16 + 3 + 3
