import json
import subprocess
import sys
import time

import pytest

from factorcop.cli import main


def run(args, tmp_path, name="out"):
    out = tmp_path / name
    code = main(list(args) + ["--out", str(out)])
    return code, out


def test_simulate_then_fit(tmp_path, capsys):
    code, sim_out = run(["simulate", "--preset", "normal-1f-gauss", "--m", "150", "--seed", "3"],
                        tmp_path, "sim")
    assert code == 0 and (sim_out / "data.csv").exists()
    code, fit_out = run(["fit", "--data", str(sim_out / "data.csv"), "--response", "normal",
                         "--format", "json"], tmp_path, "fit")
    assert code == 0
    doc = json.loads((fit_out / "fit.json").read_text())
    assert abs(doc["factor"]["rho1"] - 0.5) < 0.1
    assert doc["marginal"]["names"][-1] == "phi"
    assert doc["godambe"]["names"][-1] == "rho1"
    summary = (fit_out / "summary.txt").read_text()
    assert "rho1" in summary and "AIC" in summary
    man = json.loads((fit_out / "manifest.json").read_text())
    assert set(man["outputs"]) == {"fit.json", "summary.txt", "estimates.csv"}
    assert man["seed"] == 0 and "numpy" in man["versions"]


def test_fit_t_and_random_effects(tmp_path):
    _, sim_out = run(["simulate", "--preset", "binary-ri", "--m", "120"], tmp_path, "sim")
    data = str(sim_out / "data.csv")
    code, out = run(["fit", "--data", data, "--response", "binary", "--copula", "t",
                     "--nu-grid", "3:6", "--format", "csv"], tmp_path, "t")
    assert code == 0
    assert json.loads((out / "fit.json").read_text())["factor"]["nu"] in (3, 4, 5, 6)
    code, out = run(["fit", "--data", data, "--response", "binary", "--random-effects", "RI",
                     "--slope-scale", "0.1"], tmp_path, "ri")
    assert code == 0
    assert json.loads((out / "fit.json").read_text())["mixed"]["spec"] == "RI"


def test_column_mapping_and_recode(tmp_path):
    csv = tmp_path / "d.csv"
    rows = ["patient,years,hier,age"]
    for i in range(60):
        for j in range(3):
            rows.append(f"p{i},{j},{(i + j * (i % 3)) % 4},{(i % 7) / 7}")
    csv.write_text("\n".join(rows) + "\n")
    code, out = run(["fit", "--data", str(csv), "--response", "ordinal", "--K", "4", "--recode", "1",
                     "--col-id", "patient", "--col-time", "years", "--col-y", "hier",
                     "--col-covariates", "age", "--time-scale", "0.5"], tmp_path)
    assert code == 0
    doc = json.loads((out / "fit.json").read_text())
    assert doc["data"]["m"] == 60 and doc["marginal"]["names"] == ["beta[age]", "gamma1", "gamma2", "gamma3"]


def test_missing_file_exit_2(tmp_path, capsys):
    code, _ = run(["fit", "--data", str(tmp_path / "none.csv"), "--response", "normal"], tmp_path)
    assert code == 2
    assert "data error" in capsys.readouterr().err


def test_missing_column_exit_2(tmp_path):
    csv = tmp_path / "d.csv"
    csv.write_text("id,time,value\na,1,2\n")
    code, _ = run(["fit", "--data", str(csv), "--response", "normal"], tmp_path)
    assert code == 2


def test_convergence_exit_3(tmp_path, capsys):
    # category 4 never occurs, so its threshold escapes to infinity
    csv = tmp_path / "d.csv"
    rows = ["id,time,y,x"] + [f"s{i},{j},{1 + (i + j) % 3},{i % 2}" for i in range(30) for j in range(3)]
    csv.write_text("\n".join(rows) + "\n")
    code, _ = run(["fit", "--data", str(csv), "--response", "ordinal", "--K", "4"], tmp_path)
    assert code == 3
    assert "stage 'marginal'" in capsys.readouterr().err


def test_nu_with_gaussian_rejected(tmp_path):
    csv = tmp_path / "d.csv"
    csv.write_text("id,time,y\na,1,2\n")
    code, _ = run(["fit", "--data", str(csv), "--response", "normal", "--nu", "4"], tmp_path)
    assert code == 2


def test_bad_nu_grid_is_usage_error(tmp_path):
    with pytest.raises(SystemExit) as exc:
        main(["fit", "--data", "x", "--response", "normal", "--nu-grid", "9:3"])
    assert exc.value.code == 2


def test_mc_study_n1(tmp_path, capsys):
    code, _ = run(["mc-study", "--preset", "gamma-1f-gauss", "--N", "1"], tmp_path)
    assert code == 2
    assert "N >= 2 required" in capsys.readouterr().err


def test_mc_study_deterministic(tmp_path):
    args = ["mc-study", "--preset", "gamma-1f-gauss", "--m", "200", "--N", "20", "--seed", "7"]
    t0 = time.time()
    code_a, a = run(args, tmp_path, "a")
    assert time.time() - t0 < 600
    code_b, b = run(args + ["--jobs", "2"], tmp_path, "b")
    assert code_a == code_b == 0
    for name in ("report.csv", "report.txt", "report.json"):
        assert (a / name).read_bytes() == (b / name).read_bytes()
    ma, mb = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma["outputs"] == mb["outputs"]
    assert ma["design"]["seed"] == 7 and ma["recipe"]["model"] == "gaussian-1f"


def test_compare_small(tmp_path):
    code, out = run(["compare", "--response", "normal", "--generators", "1f-gauss",
                     "--candidates", "RI,gaussian-1f", "--m", "60", "--N", "2"], tmp_path)
    assert code == 0
    doc = json.loads((out / "comparison.json").read_text())
    assert doc["candidates"] == ["RI", "gaussian-1f"] and doc["rows"][0]["n_ok"] == 2


def test_module_entry_point(tmp_path):
    res = subprocess.run([sys.executable, "-m", "factorcop", "simulate", "--preset", "ordinal-1f-t",
                          "--m", "10", "--out", str(tmp_path / "o")], capture_output=True, text=True)
    assert res.returncode == 0 and "m = 10" in res.stdout


def test_log_env(tmp_path):
    res = subprocess.run([sys.executable, "-m", "factorcop", "simulate", "--preset", "normal-ri",
                          "--m", "5", "--out", str(tmp_path / "o")],
                         capture_output=True, text=True, env={"FACTORCOP_LOG": "debug", "PATH": ""})
    assert res.returncode == 0
