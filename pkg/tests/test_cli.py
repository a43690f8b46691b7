import json
import subprocess
import sys

import pandas as pd
import pytest

from mswig import Dataset, Roles, ScmSpec, simulate
from mswig.cli import estimate_payload, main
from mswig.data import dumps_json
from mswig.learners import default_learners

ROLES = {"treatment": "D", "selection": "S", "outcome": "Y_star", "covariates": ["X", "Z"], "heterogeneity": ["Z"]}


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr()
    return code, out.out, out.err


@pytest.fixture(scope="module")
def m2_csv(tmp_path_factory):
    prefix = tmp_path_factory.mktemp("sim") / "m2"
    assert main(["simulate", "--template", "M2", "--n", "1200", "--seed", "3",
                 "--coef", "tau_z=0.6", "--out", str(prefix)]) == 0
    return f"{prefix}_observed.csv"


def test_derive_text(capsys):
    code, out, _ = run(capsys, "derive", "--graph", "M1")
    assert code == 0
    assert "S _||_ D" in out.splitlines()
    assert "S _||_ Y" in out.splitlines()


def test_derive_minimal_json(capsys):
    code, out, _ = run(capsys, "derive", "--graph", "M1", "--minimal", "--format", "json")
    assert code == 0 and json.loads(out)["statements"] == ["S _||_ D"]
    # every observed-level restriction of M2 involves the missing Y
    _, out, _ = run(capsys, "derive", "--graph", "M2", "--minimal", "--format", "json")
    assert json.loads(out)["statements"] == []


def test_swig_verb(capsys):
    code, out, _ = run(capsys, "swig", "--graph", "FIG1", "--intervene", "D=d")
    assert code == 0 and "D _||_ Y(d) | X" in out


def test_classify_verb(capsys):
    code, out, _ = run(capsys, "classify-missingness", "--graph", "M3", "--format", "json")
    assert code == 0 and json.loads(out)["category"] == "MNAR"


def test_check_identification(capsys):
    code, out, _ = run(capsys, "check-identification", "--graph", "M3", "--estimand", "always-observed",
                       "--adjust", "X", "--assume", "Monotonicity")
    assert code == 0 and json.loads(out)["strategy"] == "TrimmingBounds"


def test_panel_implications(capsys):
    code, out, _ = run(capsys, "implications", "--panel", "ExclusionII", "--format", "text")
    assert code == 0 and "implied D _||_ S,Y_0" in out


def test_graph_file_accepted(capsys, tmp_path):
    path = tmp_path / "g.txt"
    path.write_text("node A obs\nnode B obs\nnode C obs\nedge A -> B\nedge B -> C\n")
    code, out, _ = run(capsys, "derive", "--graph", str(path))
    assert code == 0 and "A _||_ C | B" in out


def test_estimate_equals_library(capsys, m2_csv, tmp_path):
    out = tmp_path / "est.json"
    code, _, _ = run(capsys, "estimate", "--data", m2_csv, "--roles", json.dumps(ROLES), "--model", "M2",
                     "--estimand", "ate", "--folds", "5", "--seed", "7", "--out", str(out))
    assert code == 0
    frame = pd.read_csv(m2_csv)
    ds = Dataset(frame, Roles.from_dict(ROLES))
    want = estimate_payload(ds, "M2", "ate", default_learners(), 5, 7, 0.05)
    assert out.read_text() == dumps_json(want)
    assert [g["value"] for g in want["heterogeneity"][0]["groups"]] == [0.0, 1.0]


def test_test_verb_with_catalog(capsys, m2_csv, tmp_path):
    cat = tmp_path / "cat.json"
    assert run(capsys, "implications", "--graph", "M2", "--out", str(cat))[0] == 0
    code, out, _ = run(capsys, "test", "--data", m2_csv, "--catalog", str(cat), "--multiplicity", "Bonferroni")
    assert code == 0
    assert json.loads(out)["multiplicity"] == "Bonferroni"


def test_overlap_csv(capsys, m2_csv):
    code, out, _ = run(capsys, "overlap", "--data", m2_csv, "--roles", json.dumps(ROLES), "--format", "csv")
    assert code == 0 and out.startswith("arm,bin_low")


def test_estimation_error_exit_code(capsys, m2_csv):
    code, _, err = run(capsys, "estimate", "--data", m2_csv, "--roles", json.dumps(ROLES),
                       "--model", "M2", "--estimand", "always-observed")
    assert code == 2 and "estimation failed" in err


@pytest.mark.parametrize("argv", [
    ["derive", "--graph", "M99"],
    ["estimate", "--data", "missing.csv", "--roles", json.dumps(ROLES), "--model", "M2", "--estimand", "ate"],
    ["simulate", "--template", "M2"],
    ["simulate", "--template", "M2", "--coef", "tau", "--out", "x"],
])
def test_usage_errors_exit_one(capsys, argv):
    assert run(capsys, *argv)[0] == 1


def test_log_line_on_stderr():
    proc = subprocess.run([sys.executable, "-m", "mswig.cli", "derive", "--graph", "M1", "--seed", "4"],
                          capture_output=True, text=True)
    assert "mswig: derive config=" in proc.stderr and "seed=4" in proc.stderr
    assert "config=" not in proc.stdout


def test_console_entry_point():
    proc = subprocess.run([sys.executable, "-m", "mswig.cli", "--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("mswig ")


def test_simulate_outputs_are_deterministic(tmp_path):
    for name in ("a", "b"):
        assert main(["simulate", "--template", "M3", "--n", "300", "--seed", "1", "--out", str(tmp_path / name)]) == 0
    for suffix in ("_observed.csv", "_hidden.csv", "_spec.json"):
        assert (tmp_path / f"a{suffix}").read_bytes() == (tmp_path / f"b{suffix}").read_bytes()
    assert simulate(ScmSpec("M3", 300, seed=1)).observed.shape[0] == 300
