import json
import subprocess
import sys

import pytest

from kolcouple.cli import main
from kolcouple.harness import ConfigError, ExperimentConfig, curve_csv, run_experiment


def _cfg(kind, **sections):
    raw = {"schema_version": 1, "kind": kind}
    raw.update(sections)
    return raw


def test_config_errors_are_collected():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig({"schema_version": 2, "kind": "nope", "sampling": {"replicates": 0},
                          "model": {"k": -1}, "bogus": 1})
    errs = exc.value.errors
    for field in ("schema_version", "kind", "sampling.replicates", "model.k", "bogus"):
        assert any(e.startswith(field) for e in errs), field


def test_kind_specific_validation():
    with pytest.raises(ConfigError) as exc:
        ExperimentConfig(_cfg("lookahead_scalar", model={"k": 1, "z": [0, 0]},
                              schedule={"alpha": 1.0}, numerics={}))
    errs = "\n".join(exc.value.errors)
    assert "model.z" in errs and "schedule.alpha" in errs and "numerics.n_max" in errs


def test_config_echoed_verbatim():
    raw = _cfg("tv_table", model={"k": 1, "z": [0, 1]}, numerics={"T": [10, 100, 1000]})
    rep = run_experiment(raw)
    assert rep["config"] == raw
    assert rep["fit"]["slope"] == pytest.approx(-1.5, abs=1e-3)


def test_bck_thread_count_does_not_matter():
    raw = _cfg("bck", numerics={"dt0": 1e-3, "t_max": 100.0}, sampling={"replicates": 700, "master_seed": 7})
    a = curve_csv(run_experiment(raw, 1))
    b = curve_csv(run_experiment(raw, 3))
    assert a == b and a.startswith("t,survival,ci_lo,ci_hi,n_at_risk")


def test_lookahead_curve_columns():
    raw = _cfg("lookahead_scalar", model={"k": 1, "z": [1, 0]}, numerics={"n_max": 12},
               sampling={"replicates": 500, "master_seed": 1})
    text = curve_csv(run_experiment(raw))
    lines = text.strip().splitlines()
    assert lines[0] == "block_n,S_n,survival,ci_lo,ci_hi" and len(lines) == 13


def test_bounded_and_hyperplane_reports():
    rep = run_experiment(_cfg("bounded_horizon", model={"k": 1, "z": [1, 0]}, numerics={"n_max": 100},
                              sampling={"replicates": 400, "master_seed": 0},
                              check={"ci_excludes_zero": True}))
    assert rep["checks"][0]["passed"]
    rep = run_experiment(_cfg("hyperplane_check", model={"k": 2}, check={"max_rel_error": 1e-9}))
    assert rep["checks"][0]["passed"]


def test_mu_t_report():
    rep = run_experiment(_cfg("mu_t", numerics={"dt0": 1e-3, "target_t": [10]},
                              sampling={"replicates": 200, "master_seed": 3}))
    row = rep["results"]["targets"][0]
    assert row["target_t"] == 10 and row["scaled_tail"] > 0
    assert curve_csv(rep).startswith("target_t,scaled_tail")


def test_cli_exit_codes(tmp_path, capsys):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps(_cfg("tv_table", model={"k": 1, "z": [1, 0]}, numerics={"T": [100, 1000]},
                                   check={"slope": -1.5, "tolerance": 0.01})))
    assert main(["run", "--config", str(cfg), "--check", "--out", str(tmp_path / "o.csv")]) == 3
    assert main(["run", "--config", str(cfg)]) == 0
    bad = tmp_path / "bad.json"
    bad.write_text("{not json")
    assert main(["run", "--config", str(bad)]) == 2
    assert main(["bounded-horizon", "--k", "0", "--z", "1", "--nmax", "5"]) == 2


def test_cli_flags_override_config(tmp_path):
    out = tmp_path / "bck.csv"
    code = main(["simulate-bck", "--scale", "1", "--dt0", "1e-3", "--tmax", "50", "--reps", "100",
                 "--seed", "2", "--out", str(out)])
    assert code == 0 and out.exists()
    rep = json.loads(out.with_suffix(".report.json").read_text())
    assert rep["config"]["sampling"] == {"replicates": 100, "master_seed": 2}


def test_cli_oracle_and_dump(capsys):
    assert main(["oracle-area", "--a", "0.75", "--t", "1"]) == 0
    out = capsys.readouterr().out
    assert "1.543995043386828e-01" in out
    assert main(["kernel-dump", "--k", "1"]) == 0
    assert json.loads(capsys.readouterr().out)["V"] == [[1, 0.5], [0.5, 1 / 3]]


def test_console_script_runs():
    res = subprocess.run([sys.executable, "-m", "kolcouple.cli", "kernel-dump", "--k", "0"],
                         capture_output=True, text=True)
    assert res.returncode == 0 and '"H": [[1]]' in res.stdout


def test_threads_env_does_not_change_results(monkeypatch):
    raw = _cfg("lookahead_scalar", model={"k": 1, "z": [1, 0]}, numerics={"n_max": 10},
               sampling={"replicates": 600, "master_seed": 5})
    monkeypatch.setenv("KOLCOUPLE_THREADS", "4")
    a = run_experiment(raw)
    monkeypatch.setenv("KOLCOUPLE_THREADS", "1")
    b = run_experiment(raw)
    assert a["threads"] == 4 and curve_csv(a) == curve_csv(b)
