"""End-to-end acceptance checks, one test per criterion.

Seeds, replication counts and tolerances are pinned here.  Each test
records a PASS/FAIL line that is repeated in the pytest terminal summary.
"""

from __future__ import annotations

import csv
import hashlib
import json
import time
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import integrate
from scipy.special import expit, logit
from scipy.stats import norm

from mswig import (
    Dataset, LearnerSpec, Roles, ScmSpec, ate_aipw, att_aipw, att_m2, attrition_catalog, builtin_graph,
    classify, d_separated, heterogeneous_effects, make_graph, m4_graph, panel_catalog, parse_statement, simulate,
    split, paired_power_comparison, zr_lee_bounds,
)
from mswig import citest
from mswig.cli import main as cli_main
from mswig.estimators import ate_components, att_components, bounds_components
from mswig.separation import dag_view

import oracles

GOLDEN = Path(__file__).parent / "golden"
SEED = 20261016


def _mc(values):
    values = np.asarray(values, float)
    return values.mean(), values.std(ddof=1) / np.sqrt(len(values))


# -- 1 ---------------------------------------------------------------------------

def test_criterion_01_dseparation_matches_moralization(verdict):
    rng = np.random.default_rng(SEED)
    start = time.perf_counter()
    queries = mismatches = 0
    for _ in range(1000):
        k = int(rng.integers(2, 8))
        parents = oracles.random_dag(rng, k, 0.3)
        names = sorted(parents)
        g = make_graph(observed=names, edges=[(p, v) for v in names for p in sorted(parents[v])])
        view = dag_view(g)
        for _ in range(10):
            x, y = rng.choice(names, 2, replace=False)
            rest = [v for v in names if v not in (x, y)]
            size = int(rng.integers(0, min(3, len(rest)) + 1))
            z = list(rng.choice(rest, size, replace=False)) if size else []
            got = d_separated(view, x, y, z, witness=False).separated
            queries += 1
            mismatches += got != oracles.moral_dsep(parents, {x}, {y}, z)
    elapsed = time.perf_counter() - start
    verdict(1, mismatches == 0 and elapsed < 60,
            f"{queries} queries on 1000 random DAGs, {mismatches} disagreements, {elapsed:.1f}s (limit 60s)")


# -- 2 ---------------------------------------------------------------------------

def _tsv(name):
    with open(GOLDEN / name, encoding="utf-8") as fh:
        return list(csv.DictReader(fh, delimiter="\t"))


def test_criterion_02_golden_outputs(verdict):
    problems = []

    for row in _tsv("table1.tsv"):
        g = builtin_graph(row["model"])
        target = g if row["graph"] == "m-DAG" else split(g, {"D": "d"})
        st = parse_statement(row["published"], target)
        if str(st) != row["canonical"]:
            problems.append(f"{row['published']} renders as {st}")
        if not d_separated(target, st.left, st.right, st.given, witness=False).separated:
            problems.append(f"{row['model']} {row['graph']} does not imply {row['published']}")
        if classify(g, ["S"]).category != row["missingness"]:
            problems.append(f"{row['model']} missingness")

    for randomized in (False, True):
        cat = attrition_catalog(builtin_graph("M2"), randomized=randomized)
        got = {(e.name, str(st)) for e in cat.entries for st in e.implied}
        flag = "yes" if randomized else "no"
        want = {(r["type"], r["canonical"]) for r in _tsv("table2.tsv") if r["randomized"] == flag}
        for r in _tsv("table2.tsv"):
            if r["randomized"] == flag and str(parse_statement(r["published"], builtin_graph("M2"))) != r["canonical"]:
                problems.append(f"table 2 text {r['published']}")
        if got != want:
            problems.append(f"table 2 (randomized={randomized}): {sorted(got ^ want)}")

    fig6 = json.loads((GOLDEN / "fig6.json").read_text())
    g = builtin_graph(fig6["graph"])
    for text, expected in fig6["verdicts"].items():
        st = parse_statement(text, g)
        v = d_separated(g, st.left, st.right, st.given)
        if v.separated != expected["separated"] or v.witness_text != expected.get("witness"):
            problems.append(f"fig6 {text}: {v}")
    if classify(g, ["S"]).to_dict()["category"] != fig6["classifier"]["category"]:
        problems.append("fig6 classifier")

    text = panel_catalog().to_text()
    body = text.split("\n", 1)[1].strip()
    if body != (GOLDEN / "m4.txt").read_text().strip():
        problems.append("panel catalog differs from m4.txt")
    # the joint ExclusionII restriction implies both marginal restrictions stated in prose
    g2 = m4_graph("ExclusionII")
    for text in ("D _||_ Y_0", "D _||_ S"):
        if not d_separated(g2, *text.split(" _||_ ")).separated:
            problems.append(f"ExclusionII misses {text}")

    verdict(2, not problems, "golden tables, FIG6 verdicts and panel catalog" + (f": {problems}" if problems else " match"))


# -- 3 ---------------------------------------------------------------------------

def test_criterion_03_aipw_bias_and_coverage(verdict):
    reps, start = 200, time.perf_counter()
    est, cover = [], []
    for r in range(reps):
        ds = simulate(ScmSpec("M2", 2000, seed=SEED + r)).dataset()
        _, res = ate_aipw(ds, folds=10, seed=r)
        est.append(res.point)
        cover.append(res.ci[0] <= 0.5 <= res.ci[1])
    elapsed = time.perf_counter() - start
    mean, se = _mc(est)
    rate = float(np.mean(cover))
    ok = abs(mean - 0.5) <= 3 * se and 0.92 <= rate <= 0.975 and elapsed < 300
    verdict(3, ok, f"bias {mean - 0.5:+.4f} (3 MC SE = {3 * se:.4f}), coverage {rate:.3f} in [0.92, 0.975], {elapsed:.0f}s")


# -- 4 ---------------------------------------------------------------------------

def _att_truth(gx=0.5, tau=0.5, tau_x=0.5):
    e = lambda x: expit(gx * x) * norm.pdf(x)
    num = integrate.quad(lambda x: x * e(x), -np.inf, np.inf)[0]
    den = integrate.quad(e, -np.inf, np.inf)[0]
    return tau + tau_x * num / den


def test_criterion_04_att_bias_and_collapse(verdict):
    truth = _att_truth()
    est = []
    for r in range(200):
        ds = simulate(ScmSpec("M2", 2000, seed=SEED + r, coefficients={"tau_x": 0.5})).dataset()
        est.append(att_m2(ds, folds=10, seed=r)[1].point)
    mean, se = _mc(est)

    # collapse: with every outcome observed the ATT moment equals the standard doubly robust ATT
    sim = simulate(ScmSpec("M2", 2000, seed=SEED, coefficients={"tau_x": 0.5}))
    full = sim.observed.copy()
    full["S"] = 1
    full["Y_star"] = np.where(full["D"] == 1, sim.hidden["Y(1)"], sim.hidden["Y(0)"])
    ds = Dataset(full, sim.roles)
    a = att_m2(ds, folds=10, seed=3)[1].point
    b = att_aipw(ds, folds=10, seed=3)[1].point
    gap = abs(a - b)
    ok = abs(mean - truth) <= 3 * se and gap <= 1e-10
    verdict(4, ok, f"ATT bias {mean - truth:+.4f} (3 MC SE = {3 * se:.4f}); S=1 collapse gap {gap:.1e} (limit 1e-10)")


# -- 5 ---------------------------------------------------------------------------

STEP = 1e-3


def _gateaux(score, nu, key, shift):
    def at(r):
        moved = {k: (dict(v) if isinstance(v, dict) else v) for k, v in nu.items()}
        if "." in key:
            outer, inner = key.split(".")
            moved[outer][inner] = shift(nu[outer][inner], r)
        else:
            moved[key] = shift(nu[key], r)
        return float(np.mean(score(moved)))

    return (at(STEP) - at(-STEP)) / (2 * STEP)


def _ratio_score(components, nu):
    a, b = components(nu)
    theta = a.sum() / b.sum()
    sd = float(np.std(a - theta * b, ddof=1))

    def score(moved):
        a2, b2 = components(moved)
        return a2 - theta * b2

    return score, sd


def test_criterion_05_neyman_orthogonality(verdict):
    # directions fixed before looking at results: +-0.25 (1 +- X) on the regression or logit scale
    sim = simulate(ScmSpec("M2", 10000, seed=SEED, coefficients={"tau_x": 0.5}))
    o, ds, x = sim.oracle_nuisances(), sim.dataset(), sim.observed["X"].to_numpy()
    add = lambda h: (lambda m, r: m + r * h)
    tilt = lambda h: (lambda p, r: expit(logit(p) + r * h))
    up, down = 0.25 * (1 + x), 0.25 * (1 - x)
    nu = dict(e=o.propensity(), s0=o.selection(0), s1=o.selection(1), m0=o.mean(0), m1=o.mean(1))
    y, s, d = ds.y, ds.s, ds.d
    checks = []

    ate = lambda n: ate_components(y, s, d, n["e"], n["s0"], n["s1"], n["m0"], n["m1"])
    att = lambda n: att_components(y, s, d, n["e"], n["s0"], n["s1"], n["m0"], n["m1"])
    for family, comp, dirs in (
        ("ATE", ate, {"m1": add(up), "e": tilt(down), "s1": tilt(up)}),
        ("ATT", att, {"m0": add(up), "e": tilt(down), "s0": tilt(up)}),
    ):
        score, sd = _ratio_score(comp, nu)
        checks += [(family, k, _gateaux(score, nu, k, f) / sd) for k, f in dirs.items()]

    sim3 = simulate(ScmSpec("M3", 10000, seed=SEED))
    o3, ds3, x3 = sim3.oracle_nuisances(), sim3.dataset(), sim3.observed["X"].to_numpy()
    n = len(x3)
    s0, s1, m0, m1 = o3.selection(0), o3.selection(1), o3.mean(0), o3.mean(1)
    p0 = s0 / s1
    qlo, qhi = o3.quantile(1, p0), o3.quantile(1, 1 - p0)
    nu3 = dict(
        e=o3.propensity(), s0=s0, s1=s1, m0=m0, m1=m1,
        cuts={"lo1": qlo, "hi1": qhi, "lo0": np.full(n, -np.inf), "hi0": np.full(n, np.inf)},
        trimmed={
            "lo1": o3.trimmed_mean(1, qlo) - qlo * o3.cdf(1, qlo),
            "hi1": o3.trimmed_mean(1, qhi, upper=True) - qhi * (1 - o3.cdf(1, qhi)),
            "lo0": m0, "hi0": m0,
        },
    )
    up3, down3 = 0.25 * (1 + x3), 0.25 * (1 - x3)
    positive = np.ones(n, bool)
    for end, tail in ((0, "lo1"), (1, "hi1")):
        def comp(nv, end=end):
            parts = bounds_components(ds3.y, ds3.s, ds3.d, nv["e"], nv["s0"], nv["s1"], nv["m0"], nv["m1"],
                                      positive=positive, cuts=nv["cuts"], trimmed=nv["trimmed"])
            return parts[end], parts[2]

        score, sd = _ratio_score(comp, nu3)
        for k, f in ((f"trimmed.{tail}", add(up3)), (f"cuts.{tail}", add(up3)), ("e", tilt(down3))):
            checks.append((f"bound {tail}", k, _gateaux(score, nu3, k, f) / sd))

    # a non-orthogonal comparator must fail the same check
    plug_score, plug_sd = _ratio_score(lambda n_: (n_["m1"] - n_["m0"], np.ones(len(x))), nu)
    ate_sd = _ratio_score(ate, nu)[1]
    plug = _gateaux(plug_score, nu, "m1", add(up)) / ate_sd

    worst = max(abs(c[2]) for c in checks)
    detail = ", ".join(f"{fam}/{k} {v:+.4f}" for fam, k, v in checks)
    ok = worst < 1e-2 and abs(plug) >= 1e-2
    verdict(5, ok, f"max |derivative|/sd(psi) {worst:.4f} < 0.01; plug-in comparator {plug:+.3f}; [{detail}]")


# -- 6 ---------------------------------------------------------------------------

TOY_POSITIVE = {
    0: {0: (10, [2, 3, 3, 5]), 1: (10, [1, 2, 4, 4, 6, 7, 8, 9])},
    1: {0: (10, [0, 1, 1, 2, 4, 6]), 1: (10, [2, 3, 3, 5, 6, 6, 8, 11])},
}
TOY_MIXED = {**TOY_POSITIVE, 2: {0: (10, [1, 3, 5, 7, 9, 9, 10, 12]), 1: (10, [2, 4, 6, 8])}}


def toy_bounds(spec, assumption):
    frame = pd.DataFrame(oracles.expand_cells(spec), columns=["X", "D", "S", "Y_star"])
    ds = Dataset(frame, Roles("D", "S", "Y_star", ("X",)))
    learners = {slot: LearnerSpec(slot, "StratifiedEmpirical") for slot in ("probability", "mean", "quantile")}
    return zr_lee_bounds(ds, learners=learners, folds=1, assumption=assumption)[1].interval


def test_criterion_06_bounds_validity(verdict):
    inside, ci_inside = [], []
    for r in range(200):
        ds = simulate(ScmSpec("M3", 4000, seed=SEED + r)).dataset()
        res = zr_lee_bounds(ds, folds=10, seed=r, assumption="Monotonicity")[1]
        inside.append(res.interval[0] <= 0.5 <= res.interval[1])
        ci_inside.append(res.ci[0] <= 0.5 <= res.ci[1])
    rate = float(np.mean(inside))

    gaps = []
    for spec, assumption in ((TOY_POSITIVE, "Monotonicity"), (TOY_MIXED, "ConditionalMonotonicity")):
        want = oracles.discrete_bounds(oracles.cells_from_spec(spec))
        got = toy_bounds(spec, assumption)
        gaps.append(max(abs(got[0] - want[0]), abs(got[1] - want[1])))
    ok = rate >= 0.95 and max(gaps) <= 1e-9
    verdict(6, ok, f"[L, U] contains AO-ATE 0.5 in {rate:.3f} of 200 reps (CI: {np.mean(ci_inside):.3f}); "
                   f"toy gaps to enumeration oracle {max(gaps):.1e} (limit 1e-9)")


# -- 7 ---------------------------------------------------------------------------

def test_criterion_07_designed_bias(verdict):
    strong = {"au": 2.0, "bu": 2.0}
    est, inside = [], []
    for r in range(100):
        ds = simulate(ScmSpec("M3", 8000, seed=SEED + r, coefficients=strong)).dataset()
        est.append(ate_aipw(ds, folds=5, seed=r)[1].point)
        b = zr_lee_bounds(ds, folds=5, seed=r, assumption="Monotonicity")[1]
        inside.append(b.interval[0] <= 0.5 <= b.interval[1])
    mean, se = _mc(est)
    rate = float(np.mean(inside))
    ok = abs(mean - 0.5) > 5 * se and rate >= 0.95
    verdict(7, ok, f"M2 estimator bias {mean - 0.5:+.4f} = {abs(mean - 0.5) / se:.1f} MC SE (need > 5); "
                   f"bounds contain 0.5 in {rate:.3f} of 100 reps")


# -- 8 ---------------------------------------------------------------------------

def test_criterion_08_size_and_power(verdict):
    alpha, reps = 0.05, 500
    band = 2 * np.sqrt(alpha * (1 - alpha) / reps)
    sizes = {}
    for method, options in (("PartialRegressionWald", {}), ("ChiSquareStratified", {"x_dist": "binary"})):
        rejections = 0
        for r in range(reps):
            frame = simulate(ScmSpec("M2", 2000, seed=SEED + r, coefficients={"ad": 0.0}, options=options)).observed
            rejections += citest.test_statement(frame, "S _||_ D | X", method).p_value < alpha
        sizes[method] = rejections / reps
    size_ok = all(abs(v - alpha) <= band for v in sizes.values())

    joint = panel_catalog("ExclusionII").statements()
    single = [parse_statement("Y_0 _||_ D | S")]
    first, second = [], []
    for r in range(200):
        frame = simulate(ScmSpec("M4Panel", 200, seed=SEED + r)).observed
        first.append(citest.test_catalog(frame, joint, alpha=alpha, multiplicity="Bonferroni").reject)
        second.append(citest.test_catalog(frame, single, alpha=alpha).reject)
    cmp = paired_power_comparison(np.array(first), np.array(second))
    power_ok = cmp["rateFirst"] > cmp["rateSecond"] and cmp["pValue"] < 0.05
    sizes_text = ", ".join(f"{k} {v:.3f}" for k, v in sizes.items())
    verdict(8, size_ok and power_ok,
            f"size {sizes_text} within {alpha} +- {band:.4f}; power joint {cmp['rateFirst']:.2f} vs single "
            f"{cmp['rateSecond']:.2f}, McNemar p {cmp['pValue']:.1e}")


# -- 9 ---------------------------------------------------------------------------

def test_criterion_09_heterogeneity(verdict):
    coefs = {"tau": 0.2, "tau_z": 0.6}
    cells = {0.0: [], 1.0: []}
    gap = None
    for r in range(100):
        ds = simulate(ScmSpec("M2", 2000, seed=SEED + r, coefficients=coefs)).dataset()
        sig, res = ate_aipw(ds, folds=10, seed=r)
        groups = heterogeneous_effects(sig, ds.frame["Z"].to_numpy(), "Indicators")
        if gap is None:
            gap = abs(sum(g.weight * g.result.point for g in groups) - res.point)
        for g in groups:
            cells[g.group[0]].append(g.result.point)
    target = {0.0: 0.2, 1.0: 0.8}
    devs = {z: _mc(v) for z, v in cells.items()}
    recovered = all(abs(m - target[z]) <= 3 * se for z, (m, se) in devs.items())
    detail = ", ".join(f"Z={int(z)}: {m:.4f} vs {target[z]} (3 MC SE {3 * se:.4f})" for z, (m, se) in devs.items())
    verdict(9, gap <= 1e-10 and recovered, f"weighted cell average gap {gap:.1e} (limit 1e-10); {detail}")


# -- 10 --------------------------------------------------------------------------

def _run_pipeline(workdir: Path) -> dict[str, str]:
    prefix = workdir / "m3"
    roles = json.dumps({"treatment": "D", "selection": "S", "outcome": "Y_star", "covariates": ["X"]})
    steps = [
        ["simulate", "--template", "M3", "--n", "1500", "--seed", "11", "--out", str(prefix)],
        ["implications", "--graph", "M2", "--out", str(workdir / "catalog.json")],
        ["estimate", "--data", f"{prefix}_observed.csv", "--roles", roles, "--model", "M3",
         "--estimand", "always-observed", "--seed", "5", "--out", str(workdir / "bounds.json")],
        ["estimate", "--data", f"{prefix}_observed.csv", "--roles", roles, "--model", "M2",
         "--estimand", "ate", "--seed", "5", "--format", "csv", "--out", str(workdir / "ate.csv")],
        ["test", "--data", f"{prefix}_observed.csv", "--catalog", str(workdir / "catalog.json"),
         "--method", "Permutation", "--permutations", "99", "--seed", "2", "--out", str(workdir / "test.json")],
    ]
    for argv in steps:
        assert cli_main(argv) == 0, argv
    return {p.name: hashlib.sha256(p.read_bytes()).hexdigest() for p in sorted(workdir.iterdir())}


def test_criterion_10_byte_identical_reruns(verdict, tmp_path):
    first, second = tmp_path / "a", tmp_path / "b"
    first.mkdir()
    second.mkdir()
    a, b = _run_pipeline(first), _run_pipeline(second)
    same = a == b and len(a) == 7
    verdict(10, same, f"{len(a)} output files from simulate/implications/estimate/test, identical hashes: {a == b}")
