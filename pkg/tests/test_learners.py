import numpy as np
import pytest

from mswig import LearnerSpec, cross_fit, default_learners, fit
from mswig.learners import fold_assignment, parse_learners


def test_fold_assignment_is_seeded_and_balanced():
    a = fold_assignment(103, 10, seed=4)
    assert np.array_equal(a, fold_assignment(103, 10, seed=4))
    counts = np.bincount(a)
    assert counts.max() - counts.min() <= 1
    assert not np.array_equal(a, fold_assignment(103, 10, seed=5))


def test_fold_count_validated():
    with pytest.raises(ValueError):
        fold_assignment(5, 6, 0)
    with pytest.raises(ValueError):
        fold_assignment(5, 0, 0)


def test_cross_fit_never_uses_own_fold():
    # target equals a per-row id; a stratified mean fit on other folds cannot see it
    x = np.zeros((40, 1))
    y = np.arange(40.0)
    ids = fold_assignment(40, 4, 0)
    pred = cross_fit(LearnerSpec("Mean", "StratifiedEmpirical"), x, y, fold_ids=ids)
    for k in range(4):
        assert np.allclose(pred[ids == k], y[ids != k].mean())


def test_stratified_empirical_is_exact_on_cells():
    x = np.array([[0], [0], [1], [1], [1]])
    y = np.array([1.0, 3.0, 2.0, 4.0, 9.0])
    m = fit(LearnerSpec("Mean", "StratifiedEmpirical"), x, y)
    assert np.allclose(m.predict(np.array([[0], [1]])), [2.0, 5.0])
    q = fit(LearnerSpec("Quantile", "StratifiedEmpirical"), x, y)
    assert np.allclose(q.predict(np.array([[1]]), np.array([0.5])), [4.0])


def test_linear_recovers_coefficients():
    rng = np.random.default_rng(0)
    x = rng.standard_normal((500, 2))
    y = 1 + 2 * x[:, 0] - x[:, 1]
    m = fit(LearnerSpec("Mean", "Linear"), x, y)
    assert np.allclose(m.predict(np.array([[1.0, 1.0]])), [2.0])


def test_logistic_probabilities_in_unit_interval():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((400, 1))
    y = (rng.random(400) < 1 / (1 + np.exp(-2 * x[:, 0]))).astype(float)
    p = fit(LearnerSpec("Probability", "Logistic"), x, y).predict(x)
    assert np.all((p > 0) & (p < 1))
    assert np.corrcoef(p, x[:, 0])[0, 1] > 0.9


def test_constant_target_gives_constant_predictor():
    m = fit(LearnerSpec("Probability", "Logistic"), np.ones((5, 1)), np.ones(5))
    assert m.flags["constant"]
    assert np.allclose(m.predict(np.zeros((2, 1))), 1.0)


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        fit(LearnerSpec("Probability", "Logistic"), np.ones((3, 1)), np.array([0.0, 2.0, 1.0]))
    with pytest.raises(ValueError):
        fit(LearnerSpec("Mean", "Linear"), np.array([[np.nan]]), np.array([1.0]))
    with pytest.raises(ValueError):
        LearnerSpec("Mean", "Logistic")


def test_learner_slots_parse():
    out = parse_learners({"mean": "HistGradientTrees"})
    assert out["mean"].family.value == "HistGradientTrees"
    assert out["probability"] == default_learners()["probability"]
    with pytest.raises(ValueError):
        parse_learners({"unknown": "Linear"})
