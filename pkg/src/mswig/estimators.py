"""Orthogonal moment estimators with cross-fitted nuisances.

Every estimator is a ratio of sample means, theta = mean(A) / mean(B), with
per-row signal ``psi_i = theta + (A_i - theta B_i) / mean(B)`` so that the
sample mean of the stored signal is the estimate itself.  For the ATE the
denominator is 1.

Nuisance names used throughout::

    e    P(D=1 | X)
    s_d  P(S=1 | D=d, X)
    m_d  E[Y | S=1, D=d, X]
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.stats import norm

from .data import Dataset
from .identification import IdentificationPlan
from .learners import CLIP, LearnerSpec, Task, default_learners, fit, fold_assignment, training_rows

__all__ = [
    "EstimationError",
    "MomentSignal",
    "EstimateResult",
    "BoundsSignals",
    "ate_components",
    "att_components",
    "bounds_components",
    "ate_aipw",
    "att_aipw",
    "att_m2",
    "zr_lee_bounds",
    "heterogeneous_effects",
    "overlap_report",
    "OverlapReport",
    "GroupEstimate",
    "MODELS",
    "ESTIMANDS",
    "estimate",
]


class EstimationError(RuntimeError):
    """The data cannot support the requested estimator."""


# -- result types ---------------------------------------------------------------

@dataclass
class MomentSignal:
    """Per-row moment contributions, stored uncentered so their mean is the estimate."""

    estimand: str
    endpoint: str  # Point | LowerBound | UpperBound
    numerator: np.ndarray
    denominator: np.ndarray
    provenance: dict = field(default_factory=dict)

    @property
    def theta(self) -> float:
        return float(self.numerator.mean() / self.denominator.mean())

    @property
    def values(self) -> np.ndarray:
        t = self.theta
        return t + (self.numerator - t * self.denominator) / self.denominator.mean()

    def stderr(self) -> float:
        v = self.values
        return float(v.std(ddof=1) / np.sqrt(len(v))) if len(v) > 1 else 0.0


@dataclass
class BoundsSignals:
    lower: MomentSignal
    upper: MomentSignal


@dataclass
class EstimateResult:
    estimand: str
    method: str
    n: int
    point: float | None = None
    interval: tuple[float, float] | None = None
    stderr: float | tuple[float, float] | None = None
    ci: tuple[float, float] | None = None
    level: float = 0.95
    clip_count: int = 0
    crossed: bool = False
    collapsed: bool = False
    diagnostics: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        out = {
            "estimand": self.estimand,
            "method": self.method,
            "n": self.n,
            "stderr": list(self.stderr) if isinstance(self.stderr, tuple) else self.stderr,
            "ci": list(self.ci) if self.ci else None,
            "level": self.level,
            "clipCount": self.clip_count,
            "crossed": self.crossed,
        }
        if self.interval is not None:
            out["interval"] = list(self.interval)
            out["collapsed"] = self.collapsed
        else:
            out["point"] = self.point
        if self.diagnostics:
            out["diagnostics"] = self.diagnostics
        return out


def _point_result(signal: MomentSignal, method: str, alpha: float, clips: int, diagnostics=None) -> EstimateResult:
    theta, se = signal.theta, signal.stderr()
    z = norm.ppf(1 - alpha / 2)
    return EstimateResult(
        signal.estimand, method, len(signal.numerator), point=theta, stderr=se,
        ci=(float(theta - z * se), float(theta + z * se)), level=1 - alpha, clip_count=clips,
        diagnostics=dict(diagnostics or {}),
    )


# -- moment components (pure functions) --------------------------------------------

def _clip(p, counter=None, upper=True):
    p = np.asarray(p, dtype=float)
    out = np.clip(p, CLIP, 1 - CLIP if upper else 1.0)
    if counter is not None:
        counter[0] += int(np.sum(out != p))
    return out


def ate_components(y, s, d, e, s0, s1, m0, m1):
    """Numerator of the AIPW signal with outcome selection; denominator is 1.

    psi = D S (Y - m1) / (e s1) - (1-D) S (Y - m0) / ((1-e) s0) + m1 - m0
    """
    y = np.where(s == 1, y, 0.0)
    a = d * s * (y - m1) / (e * s1) - (1 - d) * s * (y - m0) / ((1 - e) * s0) + m1 - m0
    return a, np.ones_like(a)


def att_components(y, s, d, e, s0, s1, m0, m1, variant="adjusted"):
    """Numerator and denominator of the ATT signal under a MAR outcome; B = D.

    ``variant="adjusted"``::

        A = D S (Y-m1)/s1 + D (m1 - m0) - (1-D) S (Y-m0) e / ((1-e) s0)

    which is Neyman orthogonal in (e, s0, s1, m0, m1) and reduces to the
    usual doubly robust ATT score when S = 1 everywhere.

    ``variant="printed"`` uses ``m1 e`` in the treated term and weights the
    control regression term by ``S D / P(SD=1)``.  The treated term is not
    orthogonal in e, and the control term only averages to
    ``E[Y(0) | D=1]`` when ``e s1`` does not vary with X.  Kept for comparison.
    """
    y = np.where(s == 1, y, 0.0)
    d = np.asarray(d, float)
    control = s * (1 - d) * (y - m0) * e / ((1 - e) * s0)
    if variant == "adjusted":
        return d * s * (y - m1) / s1 + d * (m1 - m0) - control, d
    if variant != "printed":
        raise ValueError("variant must be 'adjusted' or 'printed'")
    a1 = s * d * (y - m1) / s1 + m1 * e
    sd = s * d
    p_sd, p_d = sd.mean(), d.mean()
    # solve the printed control moment for E[Y(0)|D=1], then rescale to the B = D ratio form
    corr0 = control / p_d
    theta01 = corr0.mean() + (m0 * e * sd).mean() / (p_d * p_sd)
    psi01 = corr0 + (m0 * e / p_d - theta01) * sd / p_sd + theta01
    return a1 - psi01 * p_d, d


def bounds_components(y, s, d, e, s0, s1, m0, m1, *, positive, cuts, trimmed, clamped=None):
    """Numerators and common denominator of the lower and upper bound signals.

    ``positive`` marks rows where treatment raises selection (s0 <= s1).
    There the treated outcome law is trimmed to the share p0 = s0/s1; on the
    remaining rows the control law is trimmed to s1/s0.  A trimmed arm
    enters through the threshold-corrected moment::

        (Yt - mt) S 1(D=d) / P(D=d|X) + mt s_d + q a,    Yt = (Y - q) 1(Y <= q)

    (``Y >= q`` for the upper tail), where q is the trimming threshold and
    a = min(s0, s1) the always-observed share.  For a continuous outcome the
    correction term has mean zero; with ties at q it trims the tied atom
    fractionally.  Untrimmed arms use ``(Y - m) S 1(D=d) / P(D=d|X) + m s_d``.

    ``cuts`` and ``trimmed`` are dicts keyed ``lo1``, ``hi1`` (treated
    lower / upper tail) and ``lo0``, ``hi0`` (control) holding q and
    mt = E[Yt | S=1, D=d, X].  Infinite cuts mean "no trimming".
    ``clamped`` rows (monotonicity imposed although s0 > s1) are left
    untrimmed and normalized by s1.
    """
    y = np.where(s == 1, y, 0.0)
    pos = np.asarray(positive, bool)
    clamp = np.zeros(len(y), bool) if clamped is None else np.asarray(clamped, bool)
    w1, w0 = s * d / e, s * (1 - d) / (1 - e)
    share = np.where(pos & ~clamp, s0, s1)

    def trimmed_arm(key, weight, s_d, mean_d):
        q, mt = cuts[key], trimmed[key]
        finite = np.isfinite(q)
        qf = np.where(finite, q, 0.0)
        keep = (y <= qf) if key.startswith("lo") else (y >= qf)
        yt = (y - qf) * keep
        val = (yt - mt) * weight + mt * s_d + qf * share
        return np.where(finite, val, (y - mean_d) * weight + mean_d * s_d)

    untrim1 = (y - m1) * w1 + m1 * s1
    untrim0 = (y - m0) * w0 + m0 * s0
    lower1 = np.where(pos, trimmed_arm("lo1", w1, s1, m1), untrim1)
    upper1 = np.where(pos, trimmed_arm("hi1", w1, s1, m1), untrim1)
    lower0 = np.where(pos, untrim0, trimmed_arm("hi0", w0, s0, m0))
    upper0 = np.where(pos, untrim0, trimmed_arm("lo0", w0, s0, m0))
    if clamp.any():
        ratio = s1 / s0
        scaled0 = (y - m0) * w0 * ratio + m0 * s1
        lower1 = np.where(clamp, untrim1, lower1)
        upper1 = np.where(clamp, untrim1, upper1)
        lower0 = np.where(clamp, scaled0, lower0)
        upper0 = np.where(clamp, scaled0, upper0)
    b = np.where(pos & ~clamp, (s - s0) * (1 - d) / (1 - e) + s0, (s - s1) * d / e + s1)
    return lower1 - lower0, upper1 - upper0, b


# -- nuisance estimation -------------------------------------------------------------

def _learners(learners) -> dict:
    out = default_learners()
    for k, v in (learners or {}).items():
        out[k] = v if isinstance(v, LearnerSpec) else LearnerSpec.from_dict(v)
    return out


class _Fitter:
    """Fold loop helper: fits on training rows of a fold, predicts on any rows."""

    def __init__(self, ds: Dataset, features: np.ndarray, learners: dict, folds: int, seed: int):
        self.ds, self.x = ds, features
        self.learners = learners
        self.seed = seed
        self.n = len(ds)
        self.folds = fold_assignment(self.n, folds, seed)
        self.d, self.s, self.y = ds.d, ds.s, ds.y
        self.degenerate_s = bool(np.all(self.s == 1))
        self.clips = [0]

    def fit(self, slot, target, rows, k, cell):
        if not rows.any():
            raise EstimationError(f"fold {k}: no training rows for {cell}")
        spec = self.learners[slot]
        return fit(spec, self.x[rows], target[rows], seed=self.seed + k)

    def oof(self, slot, target, mask, cell) -> np.ndarray:
        out = np.empty(self.n)
        for k in range(int(self.folds.max()) + 1):
            test = self.folds == k
            model = self.fit(slot, target, training_rows(self.folds, k) & mask, k, cell)
            out[test] = model.predict(self.x[test])
        return out

    def propensity(self) -> np.ndarray:
        known = self.ds.roles.propensity
        if known is not None:
            return np.full(self.n, known)
        return self._count(self.oof("probability", self.d, np.ones(self.n, bool), "treatment"))

    def selection(self, arm) -> np.ndarray:
        if self.degenerate_s:
            return np.ones(self.n)
        return self._count(self.oof("probability", self.s, self.d == arm, f"D={arm}"))

    def outcome(self, arm) -> np.ndarray:
        return self.oof("mean", self.y, (self.s == 1) & (self.d == arm), f"S=1, D={arm}")

    def _count(self, p):
        self.clips[0] += int(np.sum((p <= CLIP) | (p >= 1 - CLIP)))
        return p


def _check_arms(ds: Dataset):
    d, s = ds.d, ds.s
    for arm in (0, 1):
        if not np.any(d == arm):
            raise EstimationError(f"empty treatment arm D={arm}")
        if not np.any((d == arm) & (s == 1)):
            raise EstimationError(f"no selected rows in arm D={arm}")


def _check_plan(plan: IdentificationPlan | None, strategies):
    if plan is not None and plan.strategy not in strategies:
        raise EstimationError(f"plan strategy {plan.strategy} does not license this estimator (needs {'/'.join(strategies)})")


def _provenance(folds, seed, learners, features):
    return {
        "folds": folds,
        "seed": seed,
        "learners": {k: v.to_dict() for k, v in sorted(learners.items())},
        "features": list(features),
    }


def _estimate_nuisances(ds, features, learners, folds, seed, need_m=True):
    f = _Fitter(ds, features, learners, folds, seed)
    nu = {"e": f.propensity(), "s0": f.selection(0), "s1": f.selection(1)}
    if need_m:
        nu["m0"], nu["m1"] = f.outcome(0), f.outcome(1)
    return nu, f


def _features(ds: Dataset, features) -> tuple[np.ndarray, tuple[str, ...]]:
    names = tuple(ds.roles.covariates if features is None else features)
    return ds.columns(names), names


def _inject(ds, nuisances, keys, counter):
    missing = [k for k in keys if k not in nuisances]
    if missing:
        raise EstimationError(f"injected nuisances lack {missing}")
    out = {k: np.broadcast_to(np.asarray(nuisances[k], float), (len(ds),)).copy() for k in keys}
    # selection probabilities only divide, so 1 is a valid value
    for k in ("e", "s0", "s1"):
        if k in out:
            out[k] = _clip(out[k], counter, upper=k == "e")
    return out


# -- estimators ---------------------------------------------------------------------

def ate_aipw(
    ds: Dataset, plan: IdentificationPlan | None = None, learners=None, folds: int = 10, seed: int = 0,
    *, features=None, nuisances: dict | None = None, alpha: float = 0.05, pooled_selection: bool = False,
) -> tuple[MomentSignal, EstimateResult]:
    """Augmented IPW estimate of E[Y(1) - Y(0)] with a MAR outcome.

    ``pooled_selection=True`` treats selection as independent of treatment
    and covariates (MCAR) and uses the overall selected share.
    """
    _check_plan(plan, ("Adjustment",))
    _check_arms(ds)
    learners = _learners(learners)
    x, names = _features(ds, features)
    clips = [0]
    if nuisances is not None:
        nu = _inject(ds, nuisances, ("e", "s0", "s1", "m0", "m1"), clips)
    else:
        nu, f = _estimate_nuisances(ds, x, learners, folds, seed)
        clips = f.clips
        if pooled_selection:
            nu["s0"] = nu["s1"] = np.full(len(ds), ds.s.mean())
    a, b = ate_components(ds.y, ds.s, ds.d, nu["e"], nu["s0"], nu["s1"], nu["m0"], nu["m1"])
    sig = MomentSignal("ATE", "Point", a, b, _provenance(folds, seed, learners, names))
    return sig, _point_result(sig, "AIPW", alpha, clips[0])


def att_m2(
    ds: Dataset, plan: IdentificationPlan | None = None, learners=None, folds: int = 10, seed: int = 0,
    *, features=None, nuisances: dict | None = None, alpha: float = 0.05, variant: str = "adjusted",
    pooled_selection: bool = False,
) -> tuple[MomentSignal, EstimateResult]:
    """Debiased E[Y(1) - Y(0) | D=1] with selection on observables for the outcome."""
    _check_plan(plan, ("WeightedAdjustmentATT", "Adjustment"))
    _check_arms(ds)
    learners = _learners(learners)
    x, names = _features(ds, features)
    clips = [0]
    if nuisances is not None:
        nu = _inject(ds, nuisances, ("e", "s0", "s1", "m0", "m1"), clips)
    else:
        nu, f = _estimate_nuisances(ds, x, learners, folds, seed)
        clips = f.clips
        if pooled_selection:
            nu["s0"] = nu["s1"] = np.full(len(ds), ds.s.mean())
    if ds.d.mean() == 0:
        raise EstimationError("P(D=1) = 0")
    a, b = att_components(ds.y, ds.s, ds.d, nu["e"], nu["s0"], nu["s1"], nu["m0"], nu["m1"], variant=variant)
    sig = MomentSignal("ATT", "Point", a, b, _provenance(folds, seed, learners, names))
    diag = {"variant": variant}
    return sig, _point_result(sig, "ATT-M2", alpha, clips[0], diag)


def att_aipw(
    ds: Dataset, learners=None, folds: int = 10, seed: int = 0, *, features=None, nuisances=None, alpha: float = 0.05,
) -> tuple[MomentSignal, EstimateResult]:
    """Doubly robust ATT for a fully observed outcome: D (Y - m0) - (1-D) (Y - m0) e / (1-e), over P(D=1)."""
    if not np.all(ds.s == 1):
        raise EstimationError("att_aipw needs a fully observed outcome")
    learners = _learners(learners)
    x, names = _features(ds, features)
    clips = [0]
    if nuisances is not None:
        nu = _inject(ds, nuisances, ("e", "m0"), clips)
    else:
        f = _Fitter(ds, x, learners, folds, seed)
        nu = {"e": f.propensity(), "m0": f.outcome(0)}
        clips = f.clips
    y, d, e = ds.y, ds.d, nu["e"]
    a = d * (y - nu["m0"]) - (1 - d) * (y - nu["m0"]) * e / (1 - e)
    sig = MomentSignal("ATT", "Point", a, d.astype(float), _provenance(folds, seed, learners, names))
    return sig, _point_result(sig, "AIPW-ATT", alpha, clips[0])


# -- bounds -------------------------------------------------------------------------

def _trim_cuts(model, xrows, level, upper):
    """Thresholds at trimming share ``level``; level >= 1 keeps everything."""
    cut = np.full(len(xrows), -np.inf if upper else np.inf)
    keep = level < 1
    if keep.any():
        q = model.predict(xrows[keep], level[keep])
        cut[keep] = -q if upper else q
    return cut


def zr_lee_bounds(
    ds: Dataset, plan: IdentificationPlan | None = None, learners=None, folds: int = 10, seed: int = 0,
    *, use_covariates: bool = True, assumption: str | None = None, partition: str | np.ndarray | None = None,
    features=None, nuisances: dict | None = None, alpha: float = 0.10,
) -> tuple[BoundsSignals, EstimateResult]:
    """Trimming bounds on the always-observed effect E[Y(1) - Y(0) | S(0)=S(1)=1].

    Under monotonicity (``assumption="Monotonicity"``) treatment never
    lowers selection: the treated outcome is trimmed to the share
    p0(x) = s0(x) / s1(x), clamped at 1.  Under conditional monotonicity the
    direction may vary with X: rows with p0(x) > 1, or rows where the
    ``partition`` column is false, trim the control arm at s1 / s0 instead.
    ``use_covariates=False`` drops X from every nuisance (the classic
    unconditional bounds).

    The reported interval uses one-sided normal endpoints at level
    ``1 - alpha`` each; this is a conservative substitute for
    misspecification-robust bound intervals.
    """
    _check_plan(plan, ("TrimmingBounds",))
    _check_arms(ds)
    if assumption is None:
        assumption = plan.assumptions[0].value if plan is not None and plan.assumptions else (
            "ConditionalMonotonicity" if use_covariates else "Monotonicity")
    if assumption not in ("Monotonicity", "ConditionalMonotonicity"):
        raise EstimationError(f"unknown monotonicity assumption {assumption!r}")
    learners = _learners(learners)
    if use_covariates:
        x, names = _features(ds, features)
    else:
        x, names = np.zeros((len(ds), 0)), ()
    n = len(ds)
    y, s, d = ds.y, ds.s, ds.d
    diag = {"assumption": assumption, "useCovariates": use_covariates}
    clips = [0]

    user_partition = None
    if partition is not None:
        user_partition = (ds.frame[partition].to_numpy() if isinstance(partition, str) else np.asarray(partition)).astype(bool)

    if nuisances is not None:
        nu = _inject(ds, nuisances, ("e", "s0", "s1", "m0", "m1"), clips)
        positive = np.asarray(nuisances.get("positive", nu["s0"] <= nu["s1"]), bool)
        clamped = np.asarray(nuisances.get("clamped", np.zeros(n, bool)), bool)
        cuts = {k: np.broadcast_to(np.asarray(nuisances["cuts"][k], float), (n,)) for k in ("lo1", "hi1", "lo0", "hi0")}
        trimmed = {k: np.broadcast_to(np.asarray(nuisances["trimmed"][k], float), (n,)) for k in ("lo1", "hi1", "lo0", "hi0")}
    else:
        nu, positive, clamped, cuts, trimmed = _bounds_nuisances(
            ds, x, learners, folds, seed, assumption, user_partition, diag, clips)

    if assumption == "Monotonicity":
        positive = np.ones(n, bool)
    a_lo, a_hi, b = bounds_components(y, s, d, nu["e"], nu["s0"], nu["s1"], nu["m0"], nu["m1"],
                                      positive=positive, cuts=cuts, trimmed=trimmed, clamped=clamped)
    prov = _provenance(folds, seed, learners, names)
    lower = MomentSignal("AlwaysObservedATE", "LowerBound", a_lo, b, prov)
    upper = MomentSignal("AlwaysObservedATE", "UpperBound", a_hi, b, prov)
    lo, hi = lower.theta, upper.theta
    se_lo, se_hi = lower.stderr(), upper.stderr()
    z = norm.ppf(1 - alpha)
    crossed = lo > hi
    if crossed:
        lo = hi = 0.5 * (lo + hi)
    collapsed = bool(np.all(s == 1))
    diag["negativeShare"] = float(1 - positive.mean())
    result = EstimateResult(
        "AlwaysObservedATE", "ZRLee bounds; CI: conservative substitute", n,
        interval=(lo, hi), stderr=(se_lo, se_hi), ci=(float(lo - z * se_lo), float(hi + z * se_hi)),
        level=1 - alpha, clip_count=clips[0], crossed=crossed, collapsed=collapsed, diagnostics=diag,
    )
    return BoundsSignals(lower, upper), result


def _bounds_nuisances(ds, x, learners, folds, seed, assumption, user_partition, diag, clips):
    n = len(ds)
    y, s, d = ds.y, ds.s, ds.d
    f = _Fitter(ds, x, learners, folds, seed)
    fold_ids = f.folds
    nu = {k: np.empty(n) for k in ("e", "s0", "s1", "m0", "m1")}
    positive = np.ones(n, bool)
    clamped_rows = np.zeros(n, bool)
    cuts = {k: np.empty(n) for k in ("lo1", "hi1", "lo0", "hi0")}
    trimmed = {k: np.empty(n) for k in ("lo1", "hi1", "lo0", "hi0")}
    qspec = learners["quantile"]
    if qspec.task is not Task.QUANTILE:
        raise EstimationError("the quantile learner slot needs a quantile task")
    clamped = 0
    known = ds.roles.propensity
    for k in range(int(fold_ids.max()) + 1):
        test = fold_ids == k
        train = training_rows(fold_ids, k)
        if known is not None:
            e_all = np.full(n, known)
        else:
            e_all = f.fit("probability", d, train, k, "treatment").predict(x)
            clips[0] += int(np.sum((e_all[test] <= CLIP) | (e_all[test] >= 1 - CLIP)))
        if f.degenerate_s:
            s0_all = s1_all = np.ones(n)
        else:
            s0_all = f.fit("probability", s, train & (d == 0), k, "D=0").predict(x)
            s1_all = f.fit("probability", s, train & (d == 1), k, "D=1").predict(x)
            clips[0] += int(np.sum((s0_all[test] <= CLIP) | (s0_all[test] >= 1 - CLIP)))
            clips[0] += int(np.sum((s1_all[test] <= CLIP) | (s1_all[test] >= 1 - CLIP)))
        p0 = s0_all / s1_all
        if assumption == "Monotonicity":
            pos = np.ones(n, bool)
            clamped += int(np.sum((p0 > 1) & test))
            clamped_rows[test] = p0[test] > 1
        elif user_partition is not None:
            pos = user_partition
        else:
            pos = p0 <= 1
        level1 = np.where(pos, np.minimum(p0, 1.0), 1.0)
        level0 = np.where(pos, 1.0, np.minimum(1.0 / p0, 1.0))
        sel1, sel0 = train & (s == 1) & (d == 1), train & (s == 1) & (d == 0)
        fits = {}
        for arm, rows, level in ((1, sel1, level1), (0, sel0, level0)):
            if not np.any(level < 1):
                fits[arm] = None
                continue
            if not rows.any():
                raise EstimationError(f"fold {k}: no training rows for S=1, D={arm}")
            fits[arm] = (
                fit(qspec, x[rows], y[rows], seed=seed + k),
                fit(qspec, x[rows], -y[rows], seed=seed + k),
            )
        c = {}
        for arm, level in ((1, level1), (0, level0)):
            if fits[arm] is None:
                c[f"lo{arm}"], c[f"hi{arm}"] = np.full(n, np.inf), np.full(n, -np.inf)
            else:
                c[f"lo{arm}"] = _trim_cuts(fits[arm][0], x, level, upper=False)
                c[f"hi{arm}"] = _trim_cuts(fits[arm][1], x, level, upper=True)
        m1 = f.fit("mean", y, sel1, k, "S=1, D=1").predict(x[test])
        m0 = f.fit("mean", y, sel0, k, "S=1, D=0").predict(x[test])
        for key, rows, arm in (("lo1", sel1, 1), ("hi1", sel1, 1), ("lo0", sel0, 0), ("hi0", sel0, 0)):
            cut = c[key]
            finite = np.isfinite(cut)
            rows = rows & finite
            if not rows.any():
                # no trimmed rows in this fold's training cell; untrimmed rows ignore the value
                trimmed[key][test] = m1 if arm == 1 else m0
            else:
                qf = np.where(finite, cut, 0.0)
                target = (y - qf) * ((y <= qf) if key.startswith("lo") else (y >= qf))
                trimmed[key][test] = f.fit("mean", target, rows, k, f"S=1, D={arm}").predict(x[test])
            cuts[key][test] = cut[test]
        nu["e"][test], nu["s0"][test], nu["s1"][test] = e_all[test], s0_all[test], s1_all[test]
        nu["m0"][test], nu["m1"][test] = m0, m1
        positive[test] = pos[test]
    diag["clampedLevels"] = clamped
    return nu, positive, clamped_rows, cuts, trimmed


# -- heterogeneity ------------------------------------------------------------------

@dataclass
class GroupEstimate:
    group: tuple
    weight: float
    result: EstimateResult


def _cell_result(num, den, estimand, endpoint, alpha, method):
    sig = MomentSignal(estimand, endpoint, num, den)
    theta = sig.theta
    v = sig.values
    se = float(np.sqrt(np.sum((v - theta) ** 2)) / len(v))  # HC0
    z = norm.ppf(1 - alpha / 2)
    return theta, se, EstimateResult(estimand, method, len(v), point=theta, stderr=se, ci=(float(theta - z * se), float(theta + z * se)), level=1 - alpha)


def heterogeneous_effects(signal, z, basis: str = "Indicators", alpha: float = 0.05):
    """Effects by heterogeneity variables ``z`` from an estimated moment signal.

    ``Indicators``: per-cell ratio estimates with robust standard errors;
    their average weighted by ``GroupEstimate.weight`` reproduces the
    unconditional estimate.  ``Linear``: robust regression of the signal on
    an intercept and ``z``; returns a coefficient table.  Bounds signals are
    handled endpoint by endpoint.
    """
    z = np.asarray(z.to_numpy() if isinstance(z, (pd.DataFrame, pd.Series)) else z, dtype=float)
    if z.ndim == 1:
        z = z.reshape(-1, 1)
    if basis == "Indicators":
        return _indicator_effects(signal, z, alpha)
    if basis == "Linear":
        return _linear_effects(signal, z, alpha)
    raise ValueError("basis must be 'Indicators' or 'Linear'")


def _indicator_effects(signal, z, alpha):
    bounds = isinstance(signal, BoundsSignals)
    first = signal.lower if bounds else signal
    if len(z) != len(first.numerator):
        raise ValueError("heterogeneity variables and signal differ in length")
    keys, inv = np.unique(z, axis=0, return_inverse=True)
    inv = inv.ravel()
    total = first.denominator.sum()
    out = []
    for g, key in enumerate(keys):
        rows = inv == g
        if not rows.any():
            raise ValueError(f"empty cell {tuple(key)}")
        den = first.denominator[rows]
        if den.sum() == 0:
            raise ValueError(f"cell {tuple(key)} has zero denominator mass")
        weight = float(den.sum() / total)
        if bounds:
            lo, se_lo, _ = _cell_result(signal.lower.numerator[rows], den, first.estimand, "LowerBound", alpha, "cell")
            hi, se_hi, _ = _cell_result(signal.upper.numerator[rows], den, first.estimand, "UpperBound", alpha, "cell")
            zc = norm.ppf(1 - alpha)
            crossed = lo > hi
            lo2, hi2 = (0.5 * (lo + hi),) * 2 if crossed else (lo, hi)
            res = EstimateResult(first.estimand, "ZRLee bounds by cell", int(rows.sum()), interval=(lo2, hi2),
                                 stderr=(se_lo, se_hi), ci=(float(lo2 - zc * se_lo), float(hi2 + zc * se_hi)), level=1 - alpha, crossed=crossed)
        else:
            _, _, res = _cell_result(signal.numerator[rows], den, first.estimand, "Point", alpha, "cell mean")
        out.append(GroupEstimate(tuple(float(v) for v in key), weight, res))
    return out


def _linear_effects(signal, z, alpha):
    bounds = isinstance(signal, BoundsSignals)
    sigs = [("LowerBound", signal.lower), ("UpperBound", signal.upper)] if bounds else [("Point", signal)]
    design = np.column_stack([np.ones(len(z)), z])
    keep = [0]
    for j in range(1, design.shape[1]):
        trial = design[:, keep + [j]]
        if np.linalg.matrix_rank(trial) == len(keep) + 1:
            keep.append(j)
    dropped = [j - 1 for j in range(1, design.shape[1]) if j not in keep]
    xm = design[:, keep]
    bread = np.linalg.inv(xm.T @ xm)
    rows = []
    zcrit = norm.ppf(1 - alpha / 2)
    for endpoint, sig in sigs:
        v = sig.values
        beta = bread @ xm.T @ v
        resid = v - xm @ beta
        meat = (xm * resid[:, None] ** 2).T @ xm
        cov = bread @ meat @ bread
        for i, j in enumerate(keep):
            se = float(np.sqrt(cov[i, i]))
            rows.append({
                "endpoint": endpoint, "term": "intercept" if j == 0 else f"z{j - 1}",
                "coef": float(beta[i]), "stderr": se,
                "ci_low": float(beta[i] - zcrit * se), "ci_high": float(beta[i] + zcrit * se),
            })
    table = pd.DataFrame(rows)
    table.attrs["dropped"] = dropped
    return table


# -- overlap ------------------------------------------------------------------------

@dataclass
class OverlapReport:
    arms: dict
    monotonicity: dict
    histogram: pd.DataFrame
    no_trimming_required: bool
    thresholds: tuple

    def to_dict(self) -> dict:
        return {
            "arms": self.arms,
            "monotonicity": self.monotonicity,
            "noTrimmingRequired": self.no_trimming_required,
            "thresholds": list(self.thresholds),
        }

    def to_csv_frame(self) -> pd.DataFrame:
        return self.histogram


def overlap_report(
    ds: Dataset, learners=None, folds: int = 10, seed: int = 0, thresholds=(0.01, 0.05, 0.1), *, features=None,
) -> OverlapReport:
    """Selection-probability overlap per treatment arm, plus monotonicity-type shares."""
    if ds.roles.selection is None:
        raise EstimationError("overlap diagnostics need a selection column")
    learners = _learners(learners)
    x, _ = _features(ds, features)
    f = _Fitter(ds, x, learners, folds, seed)
    probs = {arm: f.selection(arm) for arm in (0, 1)}
    d = ds.d
    edges = np.round(np.arange(0, 1.0 + 1e-9, 0.02), 2)
    arms, hist_rows = {}, []
    for arm in (0, 1):
        p = probs[arm][d == arm]
        if len(p) == 0:
            raise EstimationError(f"empty treatment arm D={arm}")
        counts, _ = np.histogram(p, bins=edges)
        arms[f"D={arm}"] = {
            "n": int(len(p)),
            "min": float(p.min()),
            "max": float(p.max()),
            "deciles": [float(v) for v in np.quantile(p, np.linspace(0.1, 0.9, 9))],
            "shareBelow": {str(t): float(np.mean(p < t)) for t in thresholds},
        }
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            hist_rows.append({"arm": arm, "bin_low": float(lo), "bin_high": float(hi), "count": int(c)})
    p0 = probs[0] / probs[1]
    mono = {"positive": float(np.mean(p0 <= 1)), "negative": float(np.mean(p0 > 1))}
    top = max(thresholds) if thresholds else 0.0
    no_trim = all(v["shareBelow"].get(str(top), 0.0) == 0.0 for v in arms.values()) if thresholds else True
    return OverlapReport(arms, mono, pd.DataFrame(hist_rows), no_trim, tuple(thresholds))


# -- model dispatch -----------------------------------------------------------------

MODELS = ("M1", "M2D", "M2", "ZRLee", "M3")
ESTIMANDS = ("ate", "att", "always-observed")


def estimate(
    ds: Dataset, model: str, estimand: str, learners=None, folds: int = 10, seed: int = 0, alpha: float = 0.05,
):
    """Run the estimator that a named model licenses; returns ``(signal, result)``.

    ``M1`` treats selection as unrelated to everything, ``M2D`` as depending
    on treatment only, ``M2`` on treatment and covariates.  ``ZRLee`` gives
    unconditional trimming bounds under monotonicity and ``M3`` covariate
    bounds under conditional monotonicity; both target the always-observed
    effect.
    """
    if model not in MODELS:
        raise EstimationError(f"unknown model {model!r}; choose from {list(MODELS)}")
    if estimand not in ESTIMANDS:
        raise EstimationError(f"unknown estimand {estimand!r}; choose from {list(ESTIMANDS)}")
    common = dict(learners=learners, folds=folds, seed=seed, alpha=alpha)
    if model in ("ZRLee", "M3"):
        if estimand != "always-observed":
            raise EstimationError(f"model {model} only bounds the always-observed effect")
        if model == "ZRLee":
            return zr_lee_bounds(ds, use_covariates=False, assumption="Monotonicity", **common)
        return zr_lee_bounds(ds, use_covariates=True, assumption="ConditionalMonotonicity", **common)
    if estimand == "always-observed":
        raise EstimationError(f"model {model} does not identify the always-observed effect; use ZRLee or M3")
    features = None if model == "M2" else ()
    fn = ate_aipw if estimand == "ate" else att_m2
    return fn(ds, features=features, pooled_selection=model == "M1", **common)
