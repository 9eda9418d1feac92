import json

import numpy as np
import pytest

from ssdtr.cli import main
from ssdtr.dataset import write_csv
from ssdtr.simulate import gen_continuous
from ssdtr.ssq import decide


@pytest.fixture
def files(tmp_path):
    c = gen_continuous(120, 300, seed=6)
    lab_only = gen_continuous(120, 0, seed=6)
    both = tmp_path / "all.csv"
    lab = tmp_path / "lab.csv"
    write_csv(both, c)
    write_csv(lab, lab_only)
    basis = tmp_path / "basis.json"
    basis.write_text(json.dumps(c.basis.to_json()))
    return {"all": str(both), "lab": str(lab), "basis": str(basis), "cohort": c, "dir": tmp_path}


def run(capsys, *argv):
    rc = main([str(a) for a in argv])
    out = capsys.readouterr()
    return rc, out.out, out.err


def test_no_command_is_usage_error(capsys):
    assert run(capsys)[0] == 2
    assert run(capsys, "fit", "--bogus")[0] == 2


def test_simulate_writes_outputs_and_reruns_from_manifest(tmp_path, capsys):
    out = tmp_path / "sim"
    rc, _, _ = run(capsys, "simulate", "--n", 60, "--N", 100, "--reps", 2,
                   "--oracle-m", 100_000, "--seed", 4, "--out", out)
    assert rc == 0
    for f in ("summary.csv", "reps.csv", "oracle.json", "summary.md", "manifest.json"):
        assert (out / f).exists()
    man = json.loads((out / "manifest.json").read_text())
    assert man["seed"] == 4 and man["config"]["n"] == 60 and "numpy" in man["versions"]
    again = tmp_path / "again"
    assert run(capsys, "simulate", "--config", out / "manifest.json", "--out", again)[0] == 0
    assert (again / "summary.csv").read_text() == (out / "summary.csv").read_text()


def test_simulate_usage_errors(tmp_path, capsys):
    assert run(capsys, "simulate", "--reps", 1)[0] == 2
    assert run(capsys, "simulate", "--reps", 0, "--out", tmp_path)[0] == 2
    assert run(capsys, "simulate", "--setting", "nope", "--out", tmp_path)[0] == 2
    bad = tmp_path / "cfg.json"
    bad.write_text(json.dumps({"unknown_key": 1}))
    assert run(capsys, "simulate", "--config", bad, "--out", tmp_path)[0] == 2


def test_fit_recommendations_follow_the_rule(files, capsys):
    rc, out, _ = run(capsys, "fit", "--labeled", files["all"], "--basis", files["basis"],
                     "--method", "ssl", "--seed", 1)
    assert rc == 0
    doc = json.loads(out)
    c = files["cohort"]
    g1 = np.array(doc["policy"]["stage1"]["gamma"])
    g2 = np.array(doc["policy"]["stage2"]["gamma"])
    rec = doc["recommendations"]
    assert rec["labeled"]["d1"] == decide(c.labeled.h11, g1).astype(int).tolist()
    assert rec["unlabeled"]["d2"] == decide(c.unlabeled.h21, g2).astype(int).tolist()
    assert doc["n"] == 120 and doc["N"] == 300
    assert set(doc["coefficients"]["theta1"]) == set(doc["ase"]["theta1"])


def test_fit_is_deterministic_and_honours_env_seed(files, capsys, monkeypatch):
    args = ("fit", "--labeled", files["all"], "--method", "ssl")
    a = run(capsys, *args, "--seed", 13)[1]
    assert run(capsys, *args, "--seed", 13)[1] == a
    monkeypatch.setenv("SSQ_SEED", "13")
    assert run(capsys, *args)[1] == a
    monkeypatch.setenv("SSQ_SEED", "14")
    assert run(capsys, *args)[1] != a


def test_ssl_without_unlabeled_rows(files, capsys):
    assert run(capsys, "fit", "--labeled", files["lab"], "--method", "ssl")[0] == 2
    assert run(capsys, "evaluate", "--labeled", files["lab"], "--method", "ssl-dr")[0] == 2
    assert run(capsys, "fit", "--labeled", files["dir"] / "missing.csv")[0] == 2


def test_oracle_ssl_dr_equals_sup_dr(files, capsys):
    # the labeled file again as unlabeled input: every labeled row also appears unlabeled
    common = ("--labeled", files["lab"], "--basis", files["basis"])
    sup = json.loads(run(capsys, "evaluate", *common, "--method", "sup-dr")[1])
    rc, out, _ = run(capsys, "evaluate", *common, "--unlabeled", files["lab"],
                     "--method", "ssl-dr", "--oracle-imputer")
    assert rc == 0
    assert json.loads(out)["estimate"] == pytest.approx(sup["estimate"], abs=1e-10)


def test_evaluate_modes(files, capsys):
    d = files["dir"]
    rc, _, _ = run(capsys, "fit", "--labeled", files["all"], "--out", d / "fit")
    assert rc == 0 and (d / "fit" / "manifest.json").exists()
    fit = d / "fit" / "fit.json"
    rc, out, _ = run(capsys, "evaluate", "--labeled", files["all"], "--fit", fit)
    assert rc == 0
    again = json.loads(run(capsys, "evaluate", "--labeled", files["all"])[1])
    assert json.loads(out)["estimate"] == pytest.approx(again["estimate"], abs=1e-12)
    rc, out, _ = run(capsys, "evaluate", "--labeled", files["all"], "--cv", 3,
                     "--method", "ssl-dr")
    assert rc == 0 and len(json.loads(out)["folds"]) == 3
    assert run(capsys, "evaluate", "--labeled", files["all"], "--cv", 3, "--fit", fit)[0] == 2
    assert run(capsys, "evaluate", "--labeled", files["all"], "--cv", 1)[0] == 2
    rc, out, _ = run(capsys, "evaluate", "--labeled", files["all"], "--method", "q-plugin")
    assert rc == 0 and json.loads(out)["method"] == "q-plugin"


def test_imputer_columns(files, capsys):
    args = ("fit", "--labeled", files["all"], "--method", "ssl")
    assert run(capsys, *args, "--imputer-columns", "w1_1,w2_1")[0] == 0
    assert run(capsys, *args, "--imputer-columns", "nope")[0] == 2


def test_numerical_failure_exit_code(tmp_path, capsys):
    path = tmp_path / "sep.csv"
    write_csv(path, gen_continuous(80, 0, seed=2))
    head, *body = path.read_text().splitlines()
    fixed = []
    for line in body:
        v = line.split(",")
        v[1] = "1" if float(v[0]) > 0 else "0"  # a1 decided by o1: separated
        fixed.append(",".join(v))
    path.write_text("\n".join([head] + fixed) + "\n")
    rc, _, err = run(capsys, "fit", "--labeled", path)
    assert rc == 1, err
    assert err.startswith("error: ")
