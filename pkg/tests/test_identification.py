import json

import numpy as np
import pandas as pd
import pytest

from mswig import (
    EstimandSpec, GraphError, ImplicationCatalog, attrition_catalog, builtin_graph, panel_catalog,
    plan_identification,
)
from mswig.identification import necessity_counterexample

import oracles


def test_m2_ate_point_identified_by_adjustment():
    plan = plan_identification(builtin_graph("M2"), EstimandSpec("ATE", "D", "Y", ("X",)))
    assert plan.status == "PointIdentified"
    assert plan.strategy == "Adjustment"
    assert [str(s) for s in plan.certifying] == ["D _||_ Y(d) | X", "S(d) _||_ Y(d) | D,X"]
    assert plan.outcome_column == "Y_star"


def test_m2_without_adjustment_fails():
    plan = plan_identification(builtin_graph("M2"), EstimandSpec("ATE", "D", "Y"))
    assert plan.status == "NotIdentified"
    assert str(plan.failed) == "D _||_ Y(d)"


def test_m3_needs_monotonicity_for_bounds():
    spec = EstimandSpec("AlwaysObservedATE", "D", "Y", ("X",))
    assert plan_identification(builtin_graph("M3"), spec).status == "NotIdentified"
    plan = plan_identification(builtin_graph("M3"), spec, ["Monotonicity"])
    assert plan.status == "PartiallyIdentified"
    assert plan.strategy == "TrimmingBounds"


def test_m3_ate_not_point_identified():
    plan = plan_identification(builtin_graph("M3"), EstimandSpec("ATE", "D", "Y", ("X",)))
    assert plan.status == "NotIdentified"
    assert str(plan.failed) == "S(d) _||_ Y(d) | D,X"


def test_latent_outcome_rejected():
    with pytest.raises(GraphError):
        plan_identification(builtin_graph("M3"), EstimandSpec("ATE", "D", "U"))


def test_plan_formula_evaluates_like_groupby():
    rng = np.random.default_rng(1)
    n = 4000
    x = rng.integers(0, 3, n)
    d = (rng.random(n) < 0.3 + 0.2 * (x == 1)).astype(int)
    s = (rng.random(n) < 0.5 + 0.1 * x + 0.2 * d).astype(int)
    y = x + d + rng.standard_normal(n)
    frame = pd.DataFrame({"X": x, "D": d, "S": s, "Y_star": np.where(s == 1, y, np.nan)})
    plan = plan_identification(builtin_graph("M2"), EstimandSpec("ATE", "D", "Y", ("X",)))
    for arm in (0, 1):
        want = oracles.groupby_adjusted_mean(frame, arm, ["X"], "Y_star", "S")
        assert plan.evaluate(frame, arm) == pytest.approx(want, abs=1e-12)


def test_catalog_json_round_trip():
    cat = attrition_catalog(builtin_graph("M2"))
    back = ImplicationCatalog.from_dict(json.loads(json.dumps(cat.to_dict())))
    assert [str(s) for s in back.statements()] == [str(s) for s in cat.statements()]


def test_randomized_catalog_merges_tests():
    cat = attrition_catalog(builtin_graph("M2"), randomized=True)
    assert len(cat.entries) == 2
    assert all("D _||_ X" in [str(s) for s in e.implied] for e in cat.entries)


def test_panel_exclusion_two_is_stronger_than_responder_restriction():
    from mswig import implies, parse_statement
    cat = panel_catalog("ExclusionII")
    assert implies(cat.statements(), parse_statement("Y_0 _||_ D | S"))
    assert not implies([parse_statement("Y_0 _||_ D | S")], cat.statements()[0])


def test_counterexample_graph():
    g, info = necessity_counterexample()
    assert info["verdicts"]["S _||_ Y"] is True
    assert info["verdicts"]["D _||_ S"] is False
