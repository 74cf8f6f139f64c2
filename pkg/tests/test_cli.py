import json
from pathlib import Path

import pytest

from singchar.cli import main, validate_config
from singchar.errors import ConfigError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def _write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def _run(cfg_path, out):
    code = main(["run", cfg_path, "--out", str(out)])
    record = json.loads((out / "run.json").read_text()) if (out / "run.json").exists() else None
    return code, record


def test_fixtures_list(capsys):
    assert main(["fixtures", "list"]) == 0
    out = capsys.readouterr().out
    assert all(name in out for name in ("F1", "F2", "F3", "F4", "F5"))


def test_verify_task_on_f2(tmp_path):
    code, rec = _run(str(CONFIGS / "f2_verify.json"), tmp_path / "v")
    assert code == 0
    suites = rec["metrics"]["suites"]
    assert all(s["passed"] for s in suites.values())
    assert "t_max" in rec and "eps_act" in rec["tolerances"]
    assert (tmp_path / "v" / "verify.csv").exists() and (tmp_path / "v" / "plot.py").exists()


def test_weak_kam_task(tmp_path):
    cfg = json.loads((CONFIGS / "f3_weak_kam.json").read_text())
    cfg["params"]["grid"] = 256
    code, rec = _run(_write(tmp_path, cfg), tmp_path / "wk")
    assert code == 0
    assert rec["metrics"]["c"] == pytest.approx(1.0, abs=1e-2)
    header = (tmp_path / "wk" / "weak_kam.csv").read_text().splitlines()[0]
    assert header == "index_0,value"


def test_malformed_configs(tmp_path, capsys):
    base = {"schema_version": 1, "task": "characteristic", "fixture": "F3"}
    bad = [
        {**base, "tolerance": 1e-3},
        {**base, "schema_version": 2},
        {**base, "task": "fly"},
        {**base, "fixture": "F9"},
        {**base, "params": {"hh": 0.1}},
        {**base, "seed": "seven"},
        {**base, "assertions": {"edi_residual": {"target": 0.0}}},
        {"schema_version": 1, "task": "transport", "model": {"kind": "mechanical"}},
    ]
    for i, cfg in enumerate(bad):
        with pytest.raises(ConfigError):
            validate_config(cfg)
        code, _ = _run(_write(tmp_path, cfg, f"bad{i}.json"), tmp_path / f"bad{i}")
        assert code == 2
    (tmp_path / "broken.json").write_text("{not json")
    assert main(["run", str(tmp_path / "broken.json"), "--out", str(tmp_path / "b")]) == 2
    assert "config error" in capsys.readouterr().err


def test_assertion_failure_exit_code(tmp_path):
    cfg = {"schema_version": 1, "task": "characteristic", "fixture": "F3",
           "params": {"x0": [0.3], "T": 0.2, "h": 2.0 ** -8},
           "assertions": {"edi_residual": {"max": 0.0}, "max_increase_rate": {"max": 1.0}}}
    code, rec = _run(_write(tmp_path, cfg), tmp_path / "a")
    assert code == 1
    assert len(rec["assertion_failures"]) == 1 and rec["assertion_failures"][0].startswith("edi_residual")


def test_numerical_failure_exit_code(tmp_path, capsys):
    cfg = {"schema_version": 1, "task": "characteristic", "fixture": "F3",
           "params": {"method": "mollified", "x0": [0.3], "T": 0.5, "h": 2.0 ** -7,
                      "k_schedule": [2.0, 4.0], "cauchy_tol": 1e-9}}
    code, rec = _run(_write(tmp_path, cfg), tmp_path / "n")
    assert code == 3
    assert rec["error"]["type"] == "NotCauchy"
    assert "NotCauchy in characteristics.integrate_mollified" in capsys.readouterr().err


def _transport_cfg(seed=5, init="lattice"):
    return {"schema_version": 1, "task": "transport", "fixture": "F3", "seed": seed,
            "params": {"particles": 200, "T": 1.0, "h": 2.0 ** -8, "init": init, "deltas": [0.02]}}


def test_transport_rerun_is_byte_identical(tmp_path):
    path = _write(tmp_path, _transport_cfg(init="random"))
    assert _run(path, tmp_path / "r1")[0] == 0
    assert _run(path, tmp_path / "r2")[0] == 0
    for name in ("cloud.csv", "run.json", "plot.py"):
        assert (tmp_path / "r1" / name).read_bytes() == (tmp_path / "r2" / name).read_bytes()


def test_seed_environment_override(tmp_path, monkeypatch):
    path = _write(tmp_path, _transport_cfg(seed=5, init="random"))
    _run(path, tmp_path / "s5")
    monkeypatch.setenv("SINGCHAR_SEED", "11")
    _, rec = _run(path, tmp_path / "s11")
    assert rec["seed"] == 11
    a = (tmp_path / "s5" / "cloud.csv").read_text()
    b = (tmp_path / "s11" / "cloud.csv").read_text()
    assert a != b
    monkeypatch.setenv("SINGCHAR_SEED", "x")
    assert _run(path, tmp_path / "bad")[0] == 2


def test_characteristic_csv_and_provenance(tmp_path):
    cfg = {"schema_version": 1, "task": "characteristic", "fixture": "F4",
           "params": {"x0": [0.25, 0.1], "T": 0.25, "h": 2.0 ** -8}}
    code, rec = _run(_write(tmp_path, cfg), tmp_path / "c")
    assert code == 0
    assert rec["t_max"] > 0 and rec["speed_bound"] > 0 and rec["seed"] == 0
    header = (tmp_path / "c" / "characteristic.csv").read_text().splitlines()[0]
    assert header == "t,x_0,x_1,p_0,p_1,h_value"
    assert "characteristic.csv" in (tmp_path / "c" / "plot.py").read_text()


def test_threads_flag(tmp_path):
    cfg = {"schema_version": 1, "task": "characteristic", "fixture": "F3",
           "params": {"x0": [0.5], "T": 0.1, "h": 2.0 ** -8}}
    path = _write(tmp_path, cfg)
    assert main(["run", path, "--out", str(tmp_path / "t"), "--threads", "1"]) == 0
    assert json.loads((tmp_path / "t" / "run.json").read_text())["threads"] == 1
    assert main(["run", path, "--out", str(tmp_path / "t0"), "--threads", "0"]) == 2


def test_verify_suite_fast(capsys):
    assert main(["verify", "--suite", "fast"]) == 0
    out = capsys.readouterr().out
    assert "FAIL" not in out and "F3" in out


def test_packaged_configs_validate():
    from singchar.cli import load_config
    for path in sorted(CONFIGS.glob("*.json")):
        assert load_config(path)["schema_version"] == 1


def test_solved_weak_kam_characteristic(tmp_path):
    cfg = json.loads((CONFIGS / "pendulum_solved.json").read_text())
    cfg["params"].update({"x0": [0.45], "T": 0.1, "h": 2.0 ** -8, "weak_kam_grid": 128})
    code, rec = _run(_write(tmp_path, cfg), tmp_path / "s")
    assert code == 0
    assert rec["weak_kam"]["c"] == pytest.approx(1.0, abs=1e-2)
    # from 0.45 the calibrated flow reaches the kink after about 0.025 and stays there
    assert rec["metrics"]["final_x"][0] == pytest.approx(0.5, abs=1e-3)
    assert rec["metrics"]["edi_residual"] <= 5e-3
