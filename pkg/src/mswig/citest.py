"""Conditional-independence tests of graph-implied restrictions on data."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np
import pandas as pd
from scipy import stats

from .data import DataError, Dataset
from .identification import ImplicationCatalog
from .separation import CIStatement, parse_statement

__all__ = ["Method", "TestResult", "CatalogResult", "TestError", "test_statement", "test_catalog", "is_discrete", "paired_power_comparison"]

MAX_LEVELS = 20
MIN_EXPECTED = 5.0


class TestError(DataError):
    """A statement cannot be tested with the requested method."""

    __test__ = False


class Method(str, Enum):
    AUTO = "Auto"
    CHI_SQUARE = "ChiSquareStratified"
    WALD = "PartialRegressionWald"
    PERMUTATION = "Permutation"


def _method(value) -> Method:
    if isinstance(value, Method):
        return value
    for m in Method:
        if str(value).lower() in (m.value.lower(), m.name.lower()):
            return m
    raise ValueError(f"unknown test method {value!r}")


@dataclass
class TestResult:
    __test__ = False

    statement: CIStatement
    statistic: float
    p_value: float
    method: Method
    dof: int | None = None
    permutations: int | None = None
    n: int = 0
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "statement": str(self.statement),
            "statistic": float(self.statistic),
            "pValue": float(self.p_value),
            "method": self.method.value,
            "dof": self.dof,
            "permutations": self.permutations,
            "n": self.n,
            "diagnostics": self.diagnostics,
        }


@dataclass
class CatalogResult:
    results: list[TestResult]
    adjusted: list[float]
    alpha: float
    multiplicity: str | None

    @property
    def reject(self) -> bool:
        return any(p < self.alpha for p in self.adjusted)

    @property
    def failed(self) -> list[str]:
        return [str(r.statement) for r, p in zip(self.results, self.adjusted) if p < self.alpha]

    def to_dict(self) -> dict:
        return {
            "alpha": self.alpha,
            "multiplicity": self.multiplicity,
            "reject": self.reject,
            "failed": self.failed,
            "results": [dict(r.to_dict(), adjustedPValue=float(p)) for r, p in zip(self.results, self.adjusted)],
        }

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for r, p in zip(self.results, self.adjusted):
            d = r.to_dict()
            d.pop("diagnostics")
            d["adjustedPValue"] = float(p)
            rows.append(d)
        cols = ["statement", "method", "statistic", "dof", "permutations", "n", "pValue", "adjustedPValue"]
        return pd.DataFrame(rows, columns=cols)


def is_discrete(values) -> bool:
    v = np.asarray(values, dtype=float)
    return bool(np.all(v == np.round(v))) and len(np.unique(v)) <= MAX_LEVELS


# -- data access ------------------------------------------------------------------

def _frame(data) -> pd.DataFrame:
    return data.frame if isinstance(data, Dataset) else data


def _column(frame, term, columns):
    name = columns.get(str(term), columns.get(term.name, term.name))
    if name not in frame.columns:
        raise TestError(f"variable {term} (column {name!r}) is not in the data")
    return name


def _prepare(frame: pd.DataFrame, st: CIStatement, columns: dict):
    """Rows used for the test plus the left, right and conditioning blocks."""
    rows = np.ones(len(frame), dtype=bool)
    for ev in st.events:
        rows &= frame[_column(frame, ev, columns)].to_numpy() == 1
    sub = frame.loc[rows]
    blocks = []
    for side in (st.left, st.right, st.given):
        names = [_column(sub, t, columns) for t in side]
        block = sub[names].to_numpy(dtype=float) if names else np.zeros((len(sub), 0))
        blocks.append(block)
    allv = np.column_stack(blocks) if sum(b.shape[1] for b in blocks) else np.zeros((len(sub), 0))
    if np.isnan(allv).any():
        raise TestError(f"missing values among the variables of {st}; add the selection event to the statement")
    return blocks, int(rows.sum())


def _codes(block: np.ndarray) -> np.ndarray:
    if block.shape[1] == 0:
        return np.zeros(len(block), dtype=int)
    _, inv = np.unique(block, axis=0, return_inverse=True)
    return inv.ravel()


# -- chi-square -------------------------------------------------------------------

def _merge_strata(a, b, z):
    """Group strata in sorted order until each group's smallest expected count reaches the threshold."""
    keys = np.unique(z)
    groups, current = [], []
    for k in keys:
        current.append(k)
        if _min_expected(a, b, np.isin(z, current)) >= MIN_EXPECTED:
            groups.append(current)
            current = []
    if current:
        if groups:
            groups[-1] = groups[-1] + current
        else:
            groups.append(current)
    label = np.empty(len(z), dtype=int)
    for g, members in enumerate(groups):
        label[np.isin(z, members)] = g
    return label, len(keys) - len(groups)


def _table(a, b):
    _, ai = np.unique(a, return_inverse=True)
    _, bi = np.unique(b, return_inverse=True)
    t = np.zeros((ai.max() + 1, bi.max() + 1))
    np.add.at(t, (ai, bi), 1)
    return t


def _min_expected(a, b, rows):
    t = _table(a[rows], b[rows])
    if t.shape[0] < 2 or t.shape[1] < 2:
        return np.inf
    exp = np.outer(t.sum(1), t.sum(0)) / t.sum()
    return exp.min()


def _chi_square(left, right, given):
    for name, block in (("left", left), ("right", right), ("conditioning", given)):
        for j in range(block.shape[1]):
            if not is_discrete(block[:, j]):
                raise TestError(
                    f"continuous {name} variable routed to ChiSquareStratified; use PartialRegressionWald or Permutation"
                )
    a, b, z = _codes(left), _codes(right), _codes(given)
    label, merged = _merge_strata(a, b, z)
    stat, dof = 0.0, 0
    for g in np.unique(label):
        rows = label == g
        t = _table(a[rows], b[rows])
        t = t[t.sum(1) > 0][:, t.sum(0) > 0]
        if t.shape[0] < 2 or t.shape[1] < 2:
            continue
        exp = np.outer(t.sum(1), t.sum(0)) / t.sum()
        stat += float(((t - exp) ** 2 / exp).sum())
        dof += (t.shape[0] - 1) * (t.shape[1] - 1)
    p = float(stats.chi2.sf(stat, dof)) if dof > 0 else 1.0
    return stat, p, dof, {"strata": int(len(np.unique(z))), "mergedStrata": int(merged)}


# -- robust Wald ------------------------------------------------------------------

def _wald_one(yv, right, given):
    n = len(yv)
    design = np.column_stack([np.ones(n), right, given])
    # drop collinear conditioning columns, keep the tested block intact
    keep = []
    for j in range(design.shape[1]):
        trial = keep + [j]
        if np.linalg.matrix_rank(design[:, trial]) == len(trial):
            keep.append(j)
    tested = [i for i, j in enumerate(keep) if 1 <= j <= right.shape[1]]
    x = design[:, keep]
    k = x.shape[1]
    if not tested or n <= k:
        return 0.0, 0
    xtx_inv = np.linalg.pinv(x.T @ x)
    beta = xtx_inv @ x.T @ yv
    resid = yv - x @ beta
    meat = (x * resid[:, None] ** 2).T @ x
    cov = xtx_inv @ meat @ xtx_inv * n / (n - k)  # HC1
    b = beta[tested]
    if np.allclose(resid, 0, atol=1e-10 * (1 + np.abs(yv).max())):
        # exact fit: any nonzero tested coefficient is a perfect dependence
        return (np.inf if np.any(np.abs(b) > 1e-10) else 0.0), len(tested)
    v = cov[np.ix_(tested, tested)]
    stat = float(b @ np.linalg.pinv(v) @ b)
    return stat, len(tested)


def _wald(left, right, given):
    stats_, dofs, ps = [], [], []
    for j in range(left.shape[1]):
        s, dof = _wald_one(left[:, j], right, given)
        stats_.append(s)
        dofs.append(dof)
        ps.append(float(stats.chi2.sf(s, dof)) if dof else 1.0)
    # several dependent variables: Bonferroni over the per-variable regressions
    j = int(np.argmin(ps))
    p = min(1.0, ps[j] * len(ps))
    return stats_[j], p, dofs[j], {"regressions": len(ps), "covariance": "HC1"}


# -- permutation ------------------------------------------------------------------

def _permutation_strata(left, given):
    if given.shape[1] == 0:
        return np.zeros(len(left), dtype=int), "none"
    disc = [j for j in range(given.shape[1]) if is_discrete(given[:, j])]
    cont = [j for j in range(given.shape[1]) if j not in disc]
    z = _codes(given[:, disc])
    if not cont:
        return z, "exact"
    design = np.column_stack([np.ones(len(left)), given])
    beta, *_ = np.linalg.lstsq(design, left[:, 0], rcond=None)
    index = design @ beta
    edges = np.quantile(index, np.linspace(0.1, 0.9, 9))
    dec = np.searchsorted(edges, index, side="right")
    return z * 10 + dec, "deciles of a fitted linear index (approximate)"


def _permutation(left, right, given, permutations, seed):
    z, rule = _permutation_strata(left, given)
    _, z = np.unique(z, return_inverse=True)

    def center(m):
        out = m.astype(float).copy()
        for g in range(z.max() + 1):
            rows = z == g
            out[rows] -= out[rows].mean(axis=0)
        return out

    lc, rc = center(left), center(right)
    scale = np.outer((lc**2).sum(0), (rc**2).sum(0))
    scale[scale == 0] = np.inf

    def statistic(lm):
        return float(((lm.T @ rc) ** 2 / scale).sum())

    observed = statistic(lc)
    rng = np.random.default_rng(seed)
    order = np.argsort(z, kind="stable")
    exceed = 0
    perm = np.empty(len(z), dtype=int)
    for _ in range(permutations):
        # row order[i] takes the left values of a random row from the same stratum
        perm[order] = np.lexsort((rng.random(len(z)), z))
        if statistic(lc[perm]) >= observed - 1e-12:
            exceed += 1
    p = (exceed + 1) / (permutations + 1)
    return observed, p, {"strata": int(z.max() + 1), "stratification": rule}


# -- public API -------------------------------------------------------------------

def test_statement(
    data, st: CIStatement | str, method="Auto", options: dict | None = None, seed: int = 0,
) -> TestResult:
    """Test one independence statement on a dataset.

    Statements carrying a selection event are tested on the rows where that
    selection indicator equals 1.  ``options``: ``permutations`` (default
    999) and ``columns``, a map from statement variables to column names.
    ``Auto`` picks the stratified chi-square test when every variable is
    discrete and the robust Wald test otherwise.
    """
    options = dict(options or {})
    if isinstance(st, str):
        st = parse_statement(st)
    frame = _frame(data)
    (left, right, given), n = _prepare(frame, st, options.get("columns", {}))
    if n == 0:
        raise TestError(f"no rows available for {st}")
    m = _method(method)
    if m is Method.AUTO:
        every = np.column_stack([left, right, given])
        m = Method.CHI_SQUARE if all(is_discrete(every[:, j]) for j in range(every.shape[1])) else Method.WALD
    if m is Method.CHI_SQUARE:
        stat, p, dof, diag = _chi_square(left, right, given)
        return TestResult(st, stat, p, m, dof=dof, n=n, diagnostics=diag)
    if m is Method.WALD:
        stat, p, dof, diag = _wald(left, right, given)
        return TestResult(st, stat, p, m, dof=dof, n=n, diagnostics=diag)
    b = int(options.get("permutations", 999))
    if b < 1:
        raise ValueError("permutation count must be positive")
    stat, p, diag = _permutation(left, right, given, b, seed)
    return TestResult(st, stat, p, m, permutations=b, n=n, diagnostics=diag)


def test_catalog(
    data, catalog: ImplicationCatalog | list, method="Auto", alpha: float = 0.05,
    multiplicity: str | None = None, options: dict | None = None, seed: int = 0,
) -> CatalogResult:
    """Test every implied statement of a catalog; the joint verdict rejects if any adjusted p < alpha."""
    statements = catalog.statements() if isinstance(catalog, ImplicationCatalog) else list(catalog)
    if multiplicity not in (None, "None", "Bonferroni"):
        raise ValueError("multiplicity must be None or 'Bonferroni'")
    if multiplicity == "None":
        multiplicity = None
    results = [test_statement(data, st, method, options, seed + i) for i, st in enumerate(statements)]
    k = len(results)
    adjusted = [min(1.0, r.p_value * k) if multiplicity == "Bonferroni" else r.p_value for r in results]
    return CatalogResult(results, adjusted, alpha, multiplicity)


def paired_power_comparison(first: np.ndarray, second: np.ndarray) -> dict:
    """One-sided exact McNemar test that ``first`` rejects more often than ``second`` on paired reps."""
    first, second = np.asarray(first, bool), np.asarray(second, bool)
    only_first = int(np.sum(first & ~second))
    only_second = int(np.sum(~first & second))
    discordant = only_first + only_second
    p = float(stats.binomtest(only_first, discordant, 0.5, alternative="greater").pvalue) if discordant else 1.0
    return {
        "rateFirst": float(first.mean()),
        "rateSecond": float(second.mean()),
        "onlyFirst": only_first,
        "onlySecond": only_second,
        "pValue": p,
    }
