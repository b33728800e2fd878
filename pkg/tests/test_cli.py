import csv
import json
import subprocess
import sys
from pathlib import Path

import pytest

from molcap import capacity, cli
from molcap.errors import ConvergenceError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

GOLDEN_HEADERS = {
    "bounds": "c_or_delta,bound_kind,value_bits,value_nats,iterations,gap,runtime_ms",
    "dominate": "dominated,mass,residual,q_len,q",
    "simulate": "mode,trials,errors,error_rate,ci95_low,ci95_high,error_rate_ref,chi2_pvalue,ztest_pvalue,verdict",
    "thm3": "bound_kind,value_bits,value_nats,iterations,tv_gap,ams_final_tv",
    "lemma-check": "trials,violations,invariant_failures,max_deficit",
}


def write_config(tmp_path, name, cfg):
    path = tmp_path / f"{name}.json"
    path.write_text(json.dumps(cfg))
    return str(path)


def run(command, config, out, *extra):
    return cli.main([command, "--config", str(config), "--out", str(out), *extra])


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


SMALL_SIM = {
    "schema_version": 1,
    "mode": "precode",
    "seed": 11,
    "production": {"family": "affine", "params": {"v": 1.0}},
    "p": {"coeffs": [1.0, 0.5]},
    "p_tilde": {"coeffs": [1.0, 0.5]},
    "codebook": {"n": 6, "M": 4, "level": 1.0},
    "trials": 5000,
}


@pytest.mark.parametrize("command", sorted(GOLDEN_HEADERS))
def test_csv_headers_are_stable(command):
    assert ",".join(cli.CSV_HEADERS[command]) == GOLDEN_HEADERS[command]


def test_bounds_affine(tmp_path):
    assert run("bounds", CONFIGS / "bounds_affine.json", tmp_path) == 0
    rows = {r["bound_kind"]: float(r["value_nats"]) for r in read_rows(tmp_path / "bounds.csv")}
    assert rows["thm1_lower"] <= rows["thm1_upper"]
    assert rows["thm2_lower"] == pytest.approx(rows["thm1_upper"], abs=2e-9)
    assert (tmp_path / "bounds.csv").read_text().splitlines()[0] == GOLDEN_HEADERS["bounds"]


def test_bounds_zero_production(tmp_path):
    cfg = {"schema_version": 1, "production": {"family": "affine", "params": {"v": 0.0}}, "p0": 1.0, "s_max": 1.0}
    assert run("bounds", write_config(tmp_path, "zero", cfg), tmp_path) == 0
    assert all(float(r["value_nats"]) == 0.0 for r in read_rows(tmp_path / "bounds.csv"))


def test_bounds_sweep_is_monotone(tmp_path):
    assert run("bounds", CONFIGS / "bounds_sweep.json", tmp_path) == 0
    rows = read_rows(tmp_path / "bounds.csv")
    assert len(rows) == 6
    for kind in ("peak", "avg"):
        vals = [float(r["value_nats"]) for r in rows if r["bound_kind"] == kind]
        assert len(vals) == 3 and vals == sorted(vals)


def test_dominate_accept_and_reject(tmp_path):
    assert run("dominate", CONFIGS / "dominate.json", tmp_path) == 0
    payload = json.loads((tmp_path / "dominate.json").read_text())
    assert payload["dominated"] and payload["certificate"]["mass"] == pytest.approx(1.0)
    cfg = {"schema_version": 1, "p": {"coeffs": [1, 0, 0]}, "p_tilde": {"coeffs": [0.5, 0.3, 0.1]}}
    assert run("dominate", write_config(tmp_path, "identity", cfg), tmp_path) == 0
    payload = json.loads((tmp_path / "dominate.json").read_text())
    assert payload["certificate"]["mass"] == pytest.approx(0.9)
    assert run("dominate", CONFIGS / "dominate_reject.json", tmp_path) == 3
    assert json.loads((tmp_path / "dominate.json").read_text())["dominated"] is False


def test_config_errors_exit_2(tmp_path):
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert run("dominate", bad, tmp_path) == 2
    assert run("dominate", tmp_path / "missing.json", tmp_path) == 2
    cfg = dict(SMALL_SIM, trials=0)
    assert run("simulate", write_config(tmp_path, "zero", cfg), tmp_path) == 2
    cfg = dict(SMALL_SIM, surprise=1)
    assert run("simulate", write_config(tmp_path, "extra", cfg), tmp_path) == 2
    cfg = dict(SMALL_SIM, schema_version=2)
    assert run("simulate", write_config(tmp_path, "version", cfg), tmp_path) == 2
    assert not list(tmp_path.glob("simulate.*"))
    # passes the schema but fails the model's own parameter checks
    cfg = {"schema_version": 1, "p": {"coeffs": [0.0, 1.0]}, "p_tilde": {"coeffs": [0.5, 0.5]}}
    assert run("dominate", write_config(tmp_path, "delay", cfg), tmp_path) == 2


def test_non_convergence_exit_4(tmp_path, monkeypatch):
    def fail(*args, **kwargs):
        raise ConvergenceError("stalled", last_gap=1e-3)

    monkeypatch.setattr(capacity, "ba_avg", fail)
    assert run("bounds", CONFIGS / "bounds_sweep.json", tmp_path) == 4


def test_simulate_identity_is_byte_identical(tmp_path):
    path = write_config(tmp_path, "sim", SMALL_SIM)
    outs = []
    for k in range(2):
        out = tmp_path / f"run{k}"
        assert run("simulate", path, out) == 0
        outs.append((out / "simulate.json").read_bytes())
    assert outs[0] == outs[1]
    record = json.loads(outs[0])
    assert record["seed"] == 11 and record["summary"]["verdict"] == "pass"


def test_simulate_thin_passes(tmp_path):
    cfg = dict(SMALL_SIM, mode="thin", p={"coeffs": [2.0, 1.0]}, p_tilde={"coeffs": [1.0, 1.5, 0.5]}, trials=20000)
    assert run("simulate", write_config(tmp_path, "thin", cfg), tmp_path) == 0
    assert json.loads((tmp_path / "simulate.json").read_text())["summary"]["verdict"] == "pass"


def test_seed_override_and_format(tmp_path):
    path = write_config(tmp_path, "sim", SMALL_SIM)
    assert run("simulate", path, tmp_path / "a", "--format", "json") == 0
    assert run("simulate", path, tmp_path / "b", "--format", "json", "--seed", "12") == 0
    a = json.loads((tmp_path / "a" / "simulate.json").read_text())
    b = json.loads((tmp_path / "b" / "simulate.json").read_text())
    assert b["seed"] == 12 and a["outcomes"] != b["outcomes"]
    assert not (tmp_path / "a" / "simulate.csv").exists()
    assert run("simulate", path, tmp_path / "c", "--format", "csv") == 0
    assert not (tmp_path / "c" / "simulate.json").exists()


def test_thm3_and_lemma_check(tmp_path):
    assert run("thm3", CONFIGS / "thm3_onoff.json", tmp_path) == 0
    rep = json.loads((tmp_path / "thm3.json").read_text())["reports"][0]
    assert rep["bound_kind"] == "thm3_lower" and rep["value"] > 0
    assert run("lemma-check", CONFIGS / "lemma_check.json", tmp_path) == 0
    assert json.loads((tmp_path / "lemma_check.json").read_text())["violations"] == 0
    assert run("lemma-check", CONFIGS / "lemma_check_nonconcave.json", tmp_path) == 3


def test_report_json_round_trip(tmp_path):
    assert run("bounds", CONFIGS / "bounds_affine.json", tmp_path) == 0
    for d in json.loads((tmp_path / "bounds.json").read_text())["reports"]:
        assert capacity.BoundReport.from_dict(d).to_dict() == d


def test_module_entry_point(tmp_path):
    proc = subprocess.run(
        [sys.executable, "-m", "molcap", "dominate", "--config", str(CONFIGS / "dominate.json"), "--out", str(tmp_path)],
        capture_output=True,
        text=True,
    )
    assert proc.returncode == 0, proc.stderr
    assert (tmp_path / "dominate.csv").read_text().startswith(GOLDEN_HEADERS["dominate"])
