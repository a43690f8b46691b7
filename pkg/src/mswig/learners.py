"""Nuisance learners: conditional probabilities, means and quantiles.

Quantiles follow the inf-definition ``q(u) = inf{q : u <= F(q)}``; on an
empirical sample of size n sorted as v[0] <= ... <= v[n-1] this is
``v[ceil(u n) - 1]``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np

__all__ = [
    "Task",
    "Family",
    "LearnerSpec",
    "FittedNuisance",
    "fit",
    "fold_assignment",
    "cross_fit",
    "empirical_quantile",
    "CLIP",
]

CLIP = 1e-6


class Task(str, Enum):
    PROBABILITY = "Probability"
    MEAN = "Mean"
    QUANTILE = "Quantile"


class Family(str, Enum):
    LOGISTIC = "Logistic"
    LINEAR = "Linear"
    HIST_GRADIENT_TREES = "HistGradientTrees"
    KNN = "KNN"
    STRATIFIED_EMPIRICAL = "StratifiedEmpirical"


def _enum(cls, value):
    if isinstance(value, cls):
        return value
    for m in cls:
        if str(value).lower() in (m.value.lower(), m.name.lower()):
            return m
    raise ValueError(f"unknown {cls.__name__.lower()} {value!r}; choose from {[m.value for m in cls]}")


@dataclass(frozen=True)
class LearnerSpec:
    task: Task
    family: Family
    hyperparams: tuple = ()
    level: float | None = None  # default level for quantile tasks

    def __post_init__(self):
        object.__setattr__(self, "task", _enum(Task, self.task))
        object.__setattr__(self, "family", _enum(Family, self.family))
        hp = self.hyperparams
        if isinstance(hp, dict):
            hp = tuple(sorted(hp.items()))
        object.__setattr__(self, "hyperparams", tuple(hp))
        if self.level is not None and not 0 < self.level <= 1:
            raise ValueError("quantile level must lie in (0, 1]")
        if self.family is Family.LOGISTIC and self.task is not Task.PROBABILITY:
            raise ValueError("Logistic learners only handle probability tasks")

    @property
    def params(self) -> dict:
        return dict(self.hyperparams)

    def with_task(self, task) -> "LearnerSpec":
        task = _enum(Task, task)
        family = self.family
        if family is Family.LOGISTIC and task is not Task.PROBABILITY:
            family = Family.LINEAR
        return LearnerSpec(task, family, self.hyperparams, self.level)

    @classmethod
    def from_dict(cls, data: dict) -> "LearnerSpec":
        return cls(data["task"], data["family"], data.get("hyperparams", {}), data.get("level"))

    def to_dict(self) -> dict:
        return {"task": self.task.value, "family": self.family.value, "hyperparams": self.params, "level": self.level}


@dataclass
class FittedNuisance:
    spec: LearnerSpec
    _predict: Callable
    flags: dict = field(default_factory=dict)
    folds: np.ndarray | None = None

    def predict(self, x, levels=None) -> np.ndarray:
        x = _as_matrix(x)
        if self.spec.task is Task.QUANTILE:
            u = self.spec.level if levels is None else levels
            if u is None:
                raise ValueError("quantile prediction needs a level")
            u = np.broadcast_to(np.asarray(u, dtype=float), (len(x),))
            return self._predict(x, u)
        out = np.asarray(self._predict(x), dtype=float)
        if self.spec.task is Task.PROBABILITY:
            out = np.clip(out, CLIP, 1 - CLIP)
        return out


def _as_matrix(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    if x.ndim == 1:
        x = x.reshape(-1, 1)
    return x


def empirical_quantile(sorted_values: np.ndarray, u) -> np.ndarray:
    """Inf-definition quantile(s) of an ascending sample; ``u`` may be an array."""
    n = len(sorted_values)
    u = np.asarray(u, dtype=float)
    k = np.ceil(u * n - 1e-9 * n).astype(int) - 1
    k = np.clip(k, 0, n - 1)
    return sorted_values[k]


# -- families ---------------------------------------------------------------------

def _constant(value) -> Callable:
    return lambda x, *a: np.full(len(x), float(value))


def _linear_design(x):
    return np.column_stack([np.ones(len(x)), x])


def _fit_linear(x, y, w, flags):
    a = _linear_design(x)
    if w is not None:
        sw = np.sqrt(w)
        a_w, y_w = a * sw[:, None], y * sw
    else:
        a_w, y_w = a, y
    beta, _, rank, _ = np.linalg.lstsq(a_w, y_w, rcond=None)
    if rank < a.shape[1]:
        flags["ridge_fallback"] = True
        beta = np.linalg.solve(a_w.T @ a_w + 1e-8 * np.eye(a.shape[1]), a_w.T @ y_w)
    return lambda z: _linear_design(z) @ beta


def _cells(x):
    return [tuple(r) for r in x]


class _Strata:
    """Exact-match cells over the rows of ``x``; unseen cells fall back to the pooled sample."""

    def __init__(self, x, y, w, flags):
        self.flags = flags
        self.groups: dict = {}
        for key, yi, wi in zip(_cells(x), y, (w if w is not None else np.ones(len(y)))):
            self.groups.setdefault(key, ([], []))
            self.groups[key][0].append(yi)
            self.groups[key][1].append(wi)
        self.pooled = (np.asarray(y, float), np.ones(len(y)) if w is None else np.asarray(w, float))
        self.sorted = {k: np.sort(np.asarray(v[0], float)) for k, v in self.groups.items()}
        self.pooled_sorted = np.sort(self.pooled[0])

    def _lookup(self, key):
        if key in self.groups:
            return self.groups[key]
        self.flags["unseen_cells"] = self.flags.get("unseen_cells", 0) + 1
        return self.pooled

    def mean(self, x):
        out = np.empty(len(x))
        cache = {}
        for i, key in enumerate(_cells(x)):
            if key not in cache:
                vals, wts = self._lookup(key)
                cache[key] = float(np.average(np.asarray(vals, float), weights=np.asarray(wts, float)))
            out[i] = cache[key]
        return out

    def quantile(self, x, u):
        out = np.empty(len(x))
        for i, key in enumerate(_cells(x)):
            vals = self.sorted.get(key)
            if vals is None:
                self.flags["unseen_cells"] = self.flags.get("unseen_cells", 0) + 1
                vals = self.pooled_sorted
            out[i] = empirical_quantile(vals, u[i])
        return out


def _quantile_grid(hp) -> np.ndarray:
    grid = hp.get("grid")
    if grid is None:
        return np.round(np.linspace(0.05, 0.95, int(hp.get("grid_size", 19))), 10)
    return np.asarray(sorted(grid), dtype=float)


def _interpolate_levels(grid, table, u):
    """Row-wise interpolation of a (n, len(grid)) quantile table, after rearrangement."""
    table = np.sort(table, axis=1)
    out = np.empty(len(u))
    for i in range(len(u)):
        out[i] = np.interp(u[i], grid, table[i])
    return out


def _fit_hgb(spec, x, y, w, seed, flags):
    from sklearn.ensemble import HistGradientBoostingClassifier, HistGradientBoostingRegressor

    hp = spec.params
    common = dict(
        max_depth=hp.get("max_depth", 3),
        max_iter=hp.get("max_iter", 100),
        learning_rate=hp.get("learning_rate", 0.1),
        min_samples_leaf=hp.get("min_samples_leaf", 20),
        random_state=seed,
    )
    if spec.task is Task.PROBABILITY:
        model = HistGradientBoostingClassifier(**common).fit(x, y.astype(int), sample_weight=w)
        pos = list(model.classes_).index(1)
        return lambda z: model.predict_proba(z)[:, pos]
    if spec.task is Task.MEAN:
        model = HistGradientBoostingRegressor(**common).fit(x, y, sample_weight=w)
        return model.predict
    grid = _quantile_grid(hp)
    models = [HistGradientBoostingRegressor(loss="quantile", quantile=float(q), **common).fit(x, y) for q in grid]
    return lambda z, u: _interpolate_levels(grid, np.column_stack([m.predict(z) for m in models]), u)


def _fit_knn(spec, x, y, w, flags):
    from sklearn.neighbors import NearestNeighbors

    k = min(int(spec.params.get("n_neighbors", 50)), len(y))
    nn = NearestNeighbors(n_neighbors=k).fit(x)
    weights = np.ones(len(y)) if w is None else np.asarray(w, float)

    if spec.task is Task.QUANTILE:
        def predict(z, u):
            idx = nn.kneighbors(z, return_distance=False)
            return np.array([empirical_quantile(np.sort(y[row]), ui) for row, ui in zip(idx, u)])

        return predict

    def predict(z):
        idx = nn.kneighbors(z, return_distance=False)
        return np.array([np.average(y[row], weights=weights[row]) for row in idx])

    return predict


def _fit_logistic(spec, x, y, w, seed, flags):
    from sklearn.linear_model import LogisticRegression

    hp = spec.params
    model = LogisticRegression(C=hp.get("C", 1e4), max_iter=int(hp.get("max_iter", 1000)))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        model.fit(x, y.astype(int), sample_weight=w)
    pos = list(model.classes_).index(1)
    return lambda z: model.predict_proba(z)[:, pos]


def fit(spec: LearnerSpec, features, target, sample_weights=None, seed: int = 0) -> FittedNuisance:
    """Fit one nuisance function.

    Degenerate inputs do not raise: a constant target or a design without
    columns yields a constant predictor (``flags["constant"]``), and a
    rank-deficient linear design falls back to a tiny ridge penalty
    (``flags["ridge_fallback"]``).
    """
    x = _as_matrix(features)
    y = np.asarray(target, dtype=float)
    w = None if sample_weights is None else np.asarray(sample_weights, dtype=float)
    if len(y) == 0:
        raise ValueError("cannot fit a learner on zero rows")
    if len(x) != len(y):
        raise ValueError("features and target lengths differ")
    if not np.all(np.isfinite(x)) or not np.all(np.isfinite(y)):
        raise ValueError("features and target must be finite (filter missing rows first)")
    if spec.task is Task.PROBABILITY and not np.isin(y, (0.0, 1.0)).all():
        raise ValueError("probability targets must be binary 0/1")
    if spec.task is Task.QUANTILE and w is not None:
        raise ValueError("weighted quantile learners are not supported")
    flags: dict = {}

    if spec.task is Task.QUANTILE:
        if spec.family is Family.STRATIFIED_EMPIRICAL or x.shape[1] == 0:
            strata = _Strata(x, y, None, flags)
            return FittedNuisance(spec, strata.quantile, flags)
        if spec.family is Family.LINEAR:
            loc = _fit_linear(x, y, None, flags)
            resid = np.sort(y - loc(x))
            return FittedNuisance(spec, lambda z, u: loc(z) + empirical_quantile(resid, u), flags)
        if spec.family is Family.HIST_GRADIENT_TREES:
            return FittedNuisance(spec, _fit_hgb(spec, x, y, None, seed, flags), flags)
        if spec.family is Family.KNN:
            return FittedNuisance(spec, _fit_knn(spec, x, y, None, flags), flags)
        raise ValueError(f"{spec.family.value} does not support quantile tasks")

    if np.ptp(y) == 0 or x.shape[1] == 0:
        flags["constant"] = True
        value = np.average(y, weights=w) if w is not None else y.mean()
        return FittedNuisance(spec, _constant(value), flags)
    if spec.family is Family.STRATIFIED_EMPIRICAL:
        return FittedNuisance(spec, _Strata(x, y, w, flags).mean, flags)
    if spec.family is Family.LINEAR:
        return FittedNuisance(spec, _fit_linear(x, y, w, flags), flags)
    if spec.family is Family.LOGISTIC:
        return FittedNuisance(spec, _fit_logistic(spec, x, y, w, seed, flags), flags)
    if spec.family is Family.HIST_GRADIENT_TREES:
        return FittedNuisance(spec, _fit_hgb(spec, x, y, w, seed, flags), flags)
    return FittedNuisance(spec, _fit_knn(spec, x, y, w, flags), flags)


# -- cross-fitting ----------------------------------------------------------------

def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Seeded permutation split into near-equal blocks; returns a fold id per row.

    ``folds=1`` puts every row in one fold, which callers treat as in-sample
    fitting (useful for exact finite-sample checks).
    """
    if folds < 1:
        raise ValueError("fold count must be positive")
    if folds > n:
        raise ValueError(f"fold count {folds} exceeds the number of rows {n}")
    perm = np.random.default_rng(seed).permutation(n)
    ids = np.empty(n, dtype=int)
    for k, block in enumerate(np.array_split(perm, folds)):
        ids[block] = k
    return ids


def training_rows(fold_ids: np.ndarray, k: int) -> np.ndarray:
    if fold_ids.max() == 0:
        return np.ones(len(fold_ids), dtype=bool)
    return fold_ids != k


def cross_fit(
    spec: LearnerSpec,
    features,
    target,
    folds: int = 10,
    seed: int = 0,
    *,
    train_mask=None,
    levels=None,
    fold_ids=None,
    cell: str = "",
) -> np.ndarray:
    """Out-of-fold predictions for every row.

    Row i is predicted by a model fit on rows outside fold(i) that also
    satisfy ``train_mask`` (for instance the selected treated rows).
    """
    x = _as_matrix(features)
    y = np.asarray(target, dtype=float)
    n = len(y)
    if fold_ids is None:
        if folds < 2:
            raise ValueError("cross-fitting needs at least two folds")
        fold_ids = fold_assignment(n, folds, seed)
    mask = np.ones(n, dtype=bool) if train_mask is None else np.asarray(train_mask, dtype=bool)
    out = np.empty(n)
    for k in range(int(fold_ids.max()) + 1):
        test = fold_ids == k
        train = training_rows(fold_ids, k) & mask
        if not train.any():
            raise ValueError(f"fold {k}: no training rows in cell {cell or 'selected'}")
        model = fit(spec, x[train], y[train], seed=seed + k)
        lv = None if levels is None else np.broadcast_to(np.asarray(levels, float), (n,))[test]
        out[test] = model.predict(x[test], lv) if spec.task is Task.QUANTILE else model.predict(x[test])
    return out


def default_learners(family: str = "Logistic") -> dict:
    """Probability learner of ``family`` with a matching mean / quantile learner."""
    prob = LearnerSpec(Task.PROBABILITY, family)
    return {
        "probability": prob,
        "mean": prob.with_task(Task.MEAN),
        "quantile": prob.with_task(Task.QUANTILE),
    }


def parse_learners(data: dict | None) -> dict:
    out = default_learners()
    for key, value in (data or {}).items():
        if key not in out:
            raise ValueError(f"unknown learner slot {key!r}; use probability, mean or quantile")
        out[key] = LearnerSpec.from_dict(value) if isinstance(value, dict) else LearnerSpec(key, value)
    return out

