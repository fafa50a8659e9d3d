import json
import os
import subprocess
import sys

import numpy as np
import pytest

from cgplvm.cli import SCHEMA_VERSION, main
from cgplvm.data import read_csv_columns, write_csv

FAST = ["--iters", "60", "--restarts", "1", "--step-size", "0.02"]


def run(*argv):
    return main([str(a) for a in argv])


@pytest.fixture(scope="module")
def fitted(tmp_path_factory):
    root = tmp_path_factory.mktemp("pipeline")
    data = root / "toy.csv"
    assert run("generate", "--kind", "survival_toy", "--n", 60, "--seed", 1, "--out", data) == 0
    out = root / "fit"
    assert run("fit", "--data", data, "--out-dir", out, "--seed", 2, *FAST) == 0
    return root, data, out


def test_generate_survival_toy(tmp_path, capsys):
    out = tmp_path / "s.csv"
    assert run("generate", "--kind", "survival_toy", "--n", 100, "--seed", 0, "--out", out) == 0
    header, cols = read_csv_columns(out)
    assert header == ["y1", "y2", "y3", "y4", "x"]
    assert cols["x"].size == 100
    th, _ = read_csv_columns(tmp_path / "s_truth.csv")
    assert th == ["z", "x"]
    assert "100 rows x 5 columns" in capsys.readouterr().out


def test_generate_is_byte_identical(tmp_path):
    for name in ("a", "b"):
        assert run("generate", "--kind", "pinwheel", "--n", 50, "--seed", 3, "--out", tmp_path / f"{name}.csv") == 0
    assert (tmp_path / "a.csv").read_bytes() == (tmp_path / "b.csv").read_bytes()
    assert (tmp_path / "a_truth.csv").read_bytes() == (tmp_path / "b_truth.csv").read_bytes()


def test_generate_usage_errors(tmp_path):
    with pytest.raises(SystemExit) as info:
        run("generate", "--kind", "spiral", "--out", tmp_path / "x.csv")
    assert info.value.code == 1
    assert run("generate", "--kind", "rings", "--n", 5, "--out", tmp_path / "x.csv") == 1
    assert run("generate", "--kind", "rings", "--out", tmp_path / "missing" / "x.csv") == 2


def test_fit_outputs(fitted):
    _, _, out = fitted
    doc = json.loads((out / "fit.json").read_text())
    assert doc["schema_version"] == SCHEMA_VERSION
    assert doc["config"]["model"]["mode"] == "map"
    assert len(doc["objective_trace"]) <= 60
    header, cols = read_csv_columns(out / "latent.csv")
    assert header == ["z1"] and cols["z1"].size == 60
    assert not (out / "censored_posterior.json").exists()


def test_decompose_outputs(fitted, tmp_path):
    _, _, out = fitted
    dest = tmp_path / "dec.json"
    assert run("decompose", "--fit-dir", out, "--feature", "y1", "--grid-size", 50, "--out", dest) == 0
    doc = json.loads(dest.read_text())
    assert len(doc["grid_z"]) == 50 and len(doc["grid_x"]) == 50
    assert len(doc["components"]["z"]["mean"]) == 50
    assert len(doc["components"]["x"]["var"]) == 50
    assert len(doc["components"]["zx"]["mean"]) == 2500
    assert len(doc["components"]["total"]["mean"]) == 2500
    assert sum(doc["fractions"].values()) == pytest.approx(1.0, abs=1e-6)
    assert set(doc["fractions"]) == {"z", "x", "zx"}


def test_decompose_shrunk_interaction(fitted, tmp_path):
    _, _, out = fitted
    doc = json.loads((out / "fit.json").read_text())
    doc["params"]["features"][0]["zx_variance"] = 1e-12
    shrunk = tmp_path / "shrunk"
    shrunk.mkdir()
    (shrunk / "fit.json").write_text(json.dumps(doc))
    dest = tmp_path / "dec.json"
    assert run("decompose", "--fit-dir", shrunk, "--feature", "y1", "--out", dest) == 0
    dec = json.loads(dest.read_text())
    assert np.max(np.abs(dec["components"]["zx"]["mean"])) < 1e-3 * np.std(dec["components"]["total"]["mean"])


def test_decompose_errors(fitted, tmp_path):
    _, _, out = fitted
    assert run("decompose", "--fit-dir", out, "--feature", "nope", "--out", tmp_path / "d.json") == 1
    assert run("decompose", "--fit-dir", tmp_path / "absent", "--feature", "y1", "--out", tmp_path / "d.json") == 2
    doc = json.loads((out / "fit.json").read_text())
    doc["schema_version"] = 99
    old = tmp_path / "old"
    old.mkdir()
    (old / "fit.json").write_text(json.dumps(doc))
    assert run("decompose", "--fit-dir", old, "--feature", "y1", "--out", tmp_path / "d.json") == 1


def test_fit_with_add_kernel_on_pinwheel(tmp_path):
    data = tmp_path / "pin.csv"
    assert run("generate", "--kind", "pinwheel", "--n", 50, "--out", data) == 0
    assert run("fit", "--data", data, "--kernel", "add", "--out-dir", tmp_path / "fit", *FAST) == 0


def test_fit_linear_add_pipeline(tmp_path, capsys):
    data = tmp_path / "lin.csv"
    assert run("generate", "--kind", "linear_add", "--n", 40, "--p", 4, "--out", data) == 0
    assert run("fit", "--data", data, "--out-dir", tmp_path / "fit", *FAST) == 0
    _, cols = read_csv_columns(tmp_path / "fit" / "latent.csv")
    assert cols["z1"].size == 40
    capsys.readouterr()
    assert run("evaluate", "--latent", tmp_path / "fit" / "latent.csv", "--truth", tmp_path / "lin_truth.csv") == 0
    assert capsys.readouterr().out.startswith("|corr| = ")


def censored_csv(tmp_path):
    data = tmp_path / "toy.csv"
    run("generate", "--kind", "survival_toy", "--n", 40, "--seed", 0, "--out", data)
    header, cols = read_csv_columns(data)
    flag = np.zeros(40)
    flag[:3] = 1
    path = tmp_path / "cens.csv"
    write_csv(path, header + ["x_censored"], [cols[h] for h in header] + [flag])
    return path


def test_fit_censoring_requires_weibull(tmp_path, capsys):
    path = censored_csv(tmp_path)
    assert run("fit", "--data", path, "--censor-cols", "x", "--out-dir", tmp_path / "f", *FAST) == 1
    assert "--weibull-shape" in capsys.readouterr().err
    assert run("fit", "--data", path, "--censor-cols", "x", "--mode", "map", "--weibull-shape", 2,
               "--weibull-scale", 1, "--out-dir", tmp_path / "f", *FAST) == 1


def test_fit_censored_variational(tmp_path):
    path = censored_csv(tmp_path)
    out = tmp_path / "f"
    assert run("fit", "--data", path, "--censor-cols", "x:x_censored", "--weibull-shape", 2,
               "--weibull-scale", 1, "--out-dir", out, *FAST) == 0
    header, cols = read_csv_columns(out / "latent.csv")
    assert header == ["z1", "z1_std"] and np.all(cols["z1_std"] > 0)
    post = json.loads((out / "censored_posterior.json").read_text())["entries"]
    assert [e["row"] for e in post] == [0, 1, 2]
    for e in post:
        assert e["lower"] <= e["q05"] <= e["mean"] <= e["q95"] <= e["upper"]


def test_fit_bad_csv(tmp_path):
    bad = tmp_path / "bad.csv"
    bad.write_text("y,x\n1,2\n3\n")
    assert run("fit", "--data", bad, "--out-dir", tmp_path / "f", *FAST) == 1
    assert run("fit", "--data", tmp_path / "none.csv", "--out-dir", tmp_path / "f", *FAST) == 2


def test_evaluate_examples(tmp_path, capsys):
    z = np.random.default_rng(0).standard_normal(1000)
    write_csv(tmp_path / "t.csv", ["z"], [z])
    write_csv(tmp_path / "same.csv", ["z1"], [z])
    write_csv(tmp_path / "neg.csv", ["z1"], [-z])
    write_csv(tmp_path / "shuf.csv", ["z1"], [np.random.default_rng(1).permutation(z)])
    write_csv(tmp_path / "short.csv", ["z1"], [z[:10]])
    capsys.readouterr()
    for name, expected in [("same", 1.0), ("neg", 1.0)]:
        assert run("evaluate", "--latent", tmp_path / f"{name}.csv", "--truth", tmp_path / "t.csv") == 0
        assert float(capsys.readouterr().out.split("=")[1]) == pytest.approx(expected)
    assert run("evaluate", "--latent", tmp_path / "shuf.csv", "--truth", tmp_path / "t.csv") == 0
    assert float(capsys.readouterr().out.split("=")[1]) < 0.1
    assert run("evaluate", "--latent", tmp_path / "short.csv", "--truth", tmp_path / "t.csv") == 1


def test_censor_experiment_small(tmp_path):
    out = tmp_path / "cx.json"
    assert run("censor-experiment", "--lower-grid", "0.9,1.7", "--n", 40, "--iters", 80, "--out", out) == 0
    doc = json.loads(out.read_text())
    assert [round(s["lower"], 6) for s in doc["scenarios"]] == [0.9, 1.7]
    for s in doc["scenarios"]:
        for person in s["individuals"]:
            assert person["mean"] >= s["lower"]
    assert run("censor-experiment", "--lower-grid", "1.7,0.9", "--out", out) == 1


def test_module_entry_point(tmp_path):
    env = dict(os.environ)
    proc = subprocess.run([sys.executable, "-m", "cgplvm", "generate", "--kind", "rings", "--n", "20",
                           "--out", str(tmp_path / "r.csv")], capture_output=True, text=True, env=env)
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "cgplvm", "fit"], capture_output=True, text=True, env=env)
    assert proc.returncode == 1
