import numpy as np
import pandas as pd
import pytest
from scipy import stats

from mswig import ScmSpec, attrition_catalog, builtin_graph, citest, simulate
from mswig.citest import TestError, is_discrete


def _frame(n=3000, dep=0.0, seed=0):
    rng = np.random.default_rng(seed)
    z = rng.integers(0, 3, n)
    a = (rng.random(n) < 0.3 + 0.1 * z).astype(int)
    b = (rng.random(n) < 0.4 + dep * a + 0.05 * z).astype(int)
    return pd.DataFrame({"A": a, "B": b, "Z": z, "W": rng.standard_normal(n) + dep * a})


def test_chi_square_matches_scipy_without_conditioning():
    f = _frame(dep=0.1)
    res = citest.test_statement(f, "A _||_ B", "ChiSquareStratified")
    table = pd.crosstab(f["A"], f["B"]).to_numpy()
    want = stats.chi2_contingency(table, correction=False)
    assert res.statistic == pytest.approx(want[0], rel=1e-10)
    assert res.p_value == pytest.approx(want[1], rel=1e-8)


def test_stratified_chi_square_sums_strata():
    f = _frame(dep=0.0)
    res = citest.test_statement(f, "A _||_ B | Z", "ChiSquareStratified")
    total = sum(stats.chi2_contingency(pd.crosstab(g["A"], g["B"]).to_numpy(), correction=False)[0]
                for _, g in f.groupby("Z"))
    assert res.statistic == pytest.approx(total, rel=1e-10)
    assert res.dof == 3


def test_auto_method_picks_by_type():
    f = _frame()
    assert citest.test_statement(f, "A _||_ B | Z").method.value == "ChiSquareStratified"
    assert citest.test_statement(f, "A _||_ W | Z").method.value == "PartialRegressionWald"


def test_wald_detects_strong_dependence():
    f = _frame(dep=0.5)
    assert citest.test_statement(f, "A _||_ W | Z", "PartialRegressionWald").p_value < 1e-6


def test_wald_exact_fit_rejects():
    f = pd.DataFrame({"A": np.arange(20.0), "B": 2 * np.arange(20.0)})
    res = citest.test_statement(f, "A _||_ B", "PartialRegressionWald")
    assert res.statistic == np.inf and res.p_value == 0.0


def test_permutation_p_value_resolution_and_seed():
    f = _frame(n=400)
    a = citest.test_statement(f, "A _||_ W | Z", "Permutation", {"permutations": 99}, seed=3)
    b = citest.test_statement(f, "A _||_ W | Z", "Permutation", {"permutations": 99}, seed=3)
    assert a.p_value == b.p_value
    assert a.p_value * 100 == pytest.approx(round(a.p_value * 100))
    assert 0.01 <= a.p_value <= 1


def test_permutation_size_small_study():
    rejections = 0
    for r in range(60):
        f = simulate(ScmSpec("M2", 400, seed=500 + r, coefficients={"ad": 0.0})).observed
        rejections += citest.test_statement(f, "S _||_ D | X", "Permutation", {"permutations": 199}, seed=r).p_value < 0.05
    assert rejections / 60 < 0.15


def test_selection_event_restricts_rows():
    f = simulate(ScmSpec("M1", 1000, seed=1)).observed
    res = citest.test_statement(f, "D _||_ Y_star [given S=1]")
    assert res.n == int(f["S"].sum())


def test_catalog_bonferroni():
    f = simulate(ScmSpec("M2", 1500, seed=2)).observed
    cat = attrition_catalog(builtin_graph("M2"))
    raw = citest.test_catalog(f, cat)
    adj = citest.test_catalog(f, cat, multiplicity="Bonferroni")
    k = len(raw.results)
    assert adj.adjusted == [min(1.0, p * k) for p in raw.adjusted]
    assert set(adj.failed) <= set(raw.failed)
    assert list(adj.to_frame().columns)[-1] == "adjustedPValue"


def test_unknown_column_is_an_error():
    with pytest.raises(TestError):
        citest.test_statement(_frame(), "A _||_ Q")


def test_discreteness_rule():
    assert is_discrete(np.array([0, 1, 2, 1]))
    assert not is_discrete(np.linspace(0, 1, 50))
    assert not is_discrete(np.arange(25))


def test_paired_comparison_counts():
    out = citest.paired_power_comparison(np.array([1, 1, 1, 0]), np.array([0, 0, 1, 0]))
    assert out["onlyFirst"] == 2 and out["onlySecond"] == 0
    assert out["pValue"] == pytest.approx(0.25)
