"""Structural causal model simulator with potential outcomes and oracle nuisances.

Templates M1, M2 and M3 share one linear-Gaussian / logistic form::

    D      ~ Bern(expit(g0 + gx X + gz Z))
    S(d)   = 1{V < expit(a0 + ax X + az Z + ad (1 - 2G) d + au U)}
    Y(d)   = b0 + bx X + bz Z + (tau + tau_x X + tau_z Z) d + bu U + sigma e

with one uniform V shared by both arms, so S(1) >= S(0) whenever the
effective ``ad`` is nonnegative.  G marks a covariate-defined group whose
selection response to treatment is reversed.  M1 switches off every
covariate and latent term; M2 switches off U; M3 draws (X, U) as a
bivariate normal pair, the simplest realization of a bidirected X <-> U edge.

``M4Panel`` draws the two-period panel with correlated unobservables
(U_0, U_1, V) and ``Custom`` runs a linear/logistic model on any m-graph.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy.special import expit, logit
from scipy.stats import norm

from .data import Dataset, Roles, dumps_json, write_csv, write_text_atomic
from .graph import MGraph, NodeKind, expand_latents, parse_graph

__all__ = ["ScmSpec", "SimulatedDataset", "simulate", "oracle", "OracleNuisances", "TEMPLATE_DEFAULTS"]

TEMPLATE_DEFAULTS = {
    "M1": dict(pd=0.5, a0=1.0, b0=0.0, tau=0.5, sigma=1.0),
    "M2": dict(
        g0=0.0, gx=0.5, gz=0.0, a0=1.0, ax=0.5, az=0.0, ad=0.5,
        b0=0.0, bx=1.0, bz=0.0, tau=0.5, tau_x=0.0, tau_z=0.0, sigma=1.0, z_share=0.5,
    ),
    "M3": dict(
        g0=0.0, gx=0.5, a0=0.5, ax=0.5, ad=1.0, au=1.0,
        b0=0.0, bx=1.0, bu=1.0, tau=0.5, tau_x=0.0, sigma=1.0, xu_corr=0.5, neg_share=0.0,
    ),
    "M4Panel": dict(
        pd=0.5, a0=0.5, ad=0.8, av=1.0, b0=0.0, b1=0.0, tau=0.5,
        rho01=0.5, rho1v=0.5, rho0v=0.5, sigma0=1.0, sigma1=1.0,
    ),
    "Custom": dict(default_coef=0.5, sigma=1.0),
}

_ZERO = dict(g0=0.0, gx=0.0, gz=0.0, a0=0.0, ax=0.0, az=0.0, ad=0.0, au=0.0,
             b0=0.0, bx=0.0, bz=0.0, bu=0.0, tau=0.0, tau_x=0.0, tau_z=0.0, sigma=1.0,
             z_share=0.0, xu_corr=0.0, neg_share=0.0)


@dataclass(frozen=True)
class ScmSpec:
    template: str
    n: int
    seed: int = 0
    coefficients: dict = field(default_factory=dict)
    options: dict = field(default_factory=dict)  # x_dist ("normal" | "binary"), treatment, ...
    graph: str | None = None  # graph text for the Custom template

    def __post_init__(self):
        if self.template not in TEMPLATE_DEFAULTS:
            raise ValueError(f"unknown template {self.template!r}; choose from {sorted(TEMPLATE_DEFAULTS)}")
        if self.n < 1:
            raise ValueError("n must be positive")
        if self.template == "Custom" and not self.graph:
            raise ValueError("the Custom template needs a graph")
        defaults = TEMPLATE_DEFAULTS[self.template]
        unknown = set(self.coefficients) - set(defaults)
        if unknown and self.template != "Custom":
            raise ValueError(f"unknown coefficient(s) for {self.template}: {sorted(unknown)}")

    @property
    def params(self) -> dict:
        base = dict(_ZERO) if self.template in ("M1", "M2", "M3") else {}
        base.update(TEMPLATE_DEFAULTS[self.template])
        base.update(self.coefficients)
        if self.template == "M1":
            base["g0"] = float(logit(base["pd"]))
        for k in ("neg_share", "z_share", "pd"):
            if k in base and not 0 <= base[k] <= 1:
                raise ValueError(f"{k} must lie in [0, 1]")
        return base

    def to_dict(self) -> dict:
        return {
            "template": self.template,
            "n": self.n,
            "seed": self.seed,
            "coefficients": dict(sorted(self.coefficients.items())),
            "options": dict(sorted(self.options.items())),
            "graph": self.graph,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "ScmSpec":
        return cls(
            data["template"], int(data["n"]), int(data.get("seed", 0)),
            dict(data.get("coefficients", {})), dict(data.get("options", {})), data.get("graph"),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:16]


@dataclass
class SimulatedDataset:
    spec: ScmSpec
    observed: pd.DataFrame
    hidden: pd.DataFrame
    roles: Roles

    def dataset(self) -> Dataset:
        return Dataset(self.observed.copy(), self.roles, {"spec": self.spec.to_dict()})

    def oracle_nuisances(self) -> "OracleNuisances":
        if self.spec.template not in ("M1", "M2", "M3"):
            raise ValueError("oracle nuisances are available for M1, M2 and M3")
        return OracleNuisances(self.spec, self.observed)

    def write(self, prefix):
        write_csv(f"{prefix}_observed.csv", self.observed)
        write_csv(f"{prefix}_hidden.csv", self.hidden)
        write_text_atomic(f"{prefix}_spec.json", dumps_json(self.spec.to_dict()))


# -- templates M1-M3 --------------------------------------------------------------

def _covariate_names(spec: ScmSpec) -> list[str]:
    p = spec.params
    if spec.template == "M1":
        return []
    if spec.template == "M2":
        return ["X", "Z"]
    return ["X"] + (["G"] if p["neg_share"] > 0 else [])


def _draw_xu(spec, rng, n):
    p = spec.params
    r = p["xu_corr"]
    xl = rng.standard_normal(n)
    u = r * xl + np.sqrt(1 - r * r) * rng.standard_normal(n)
    x = (xl > 0).astype(float) if spec.options.get("x_dist", "normal") == "binary" else xl
    return x, u


def _linear_family(spec: ScmSpec) -> SimulatedDataset:
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    if spec.template == "M1":
        x = np.zeros(n)
        u = np.zeros(n)
    elif spec.template == "M2":
        x = rng.standard_normal(n)
        if spec.options.get("x_dist", "normal") == "binary":
            x = (x > 0).astype(float)
        u = np.zeros(n)
    else:
        x, u = _draw_xu(spec, rng, n)
    z = (rng.random(n) < p["z_share"]).astype(float)
    g = (rng.random(n) < p["neg_share"]).astype(float)
    d = (rng.random(n) < expit(p["g0"] + p["gx"] * x + p["gz"] * z)).astype(int)
    v = rng.random(n)
    eps = rng.standard_normal(n)
    ad = p["ad"] * (1 - 2 * g)
    s_pot, y_pot = {}, {}
    for arm in (0, 1):
        s_pot[arm] = (v < expit(p["a0"] + p["ax"] * x + p["az"] * z + ad * arm + p["au"] * u)).astype(int)
        tau = p["tau"] + p["tau_x"] * x + p["tau_z"] * z
        y_pot[arm] = p["b0"] + p["bx"] * x + p["bz"] * z + tau * arm + p["bu"] * u + p["sigma"] * eps
    s = np.where(d == 1, s_pot[1], s_pot[0])
    y = np.where(d == 1, y_pot[1], y_pot[0])
    obs = {"X": x, "Z": z, "G": g}
    observed = pd.DataFrame({c: obs[c] for c in _covariate_names(spec)})
    observed["D"] = d
    observed["S"] = s
    observed["Y_star"] = np.where(s == 1, y, np.nan)
    hidden = pd.DataFrame({
        "Y(0)": y_pot[0], "Y(1)": y_pot[1], "S(0)": s_pot[0], "S(1)": s_pot[1],
        "stratum": _strata(s_pot[0], s_pot[1]), "U": u,
    })
    roles = Roles("D", "S", "Y_star", tuple(_covariate_names(spec)))
    return SimulatedDataset(spec, observed, hidden, roles)


def _strata(s0, s1):
    labels = np.array(["never", "control-only", "treated-only", "always"])
    return labels[np.asarray(s0) * 1 + np.asarray(s1) * 2]


# -- panel ------------------------------------------------------------------------

def _panel(spec: ScmSpec) -> SimulatedDataset:
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    cov = np.array([
        [1.0, p["rho01"], p["rho0v"]],
        [p["rho01"], 1.0, p["rho1v"]],
        [p["rho0v"], p["rho1v"], 1.0],
    ])
    if np.linalg.eigvalsh(cov).min() <= 0:
        raise ValueError("panel correlations do not form a positive definite matrix")
    lat = rng.standard_normal((n, 3)) @ np.linalg.cholesky(cov).T
    u0, u1, vv = lat.T
    d = (rng.random(n) < p["pd"]).astype(int)
    w = rng.random(n)
    y0 = p["b0"] + p["sigma0"] * u0
    s_pot = {a: (w < expit(p["a0"] + p["ad"] * a + p["av"] * vv)).astype(int) for a in (0, 1)}
    y_pot = {a: p["b1"] + p["tau"] * a + p["sigma1"] * u1 for a in (0, 1)}
    s = np.where(d == 1, s_pot[1], s_pot[0])
    y1 = np.where(d == 1, y_pot[1], y_pot[0])
    observed = pd.DataFrame({"D": d, "Y_0": y0, "S": s, "Y_1_star": np.where(s == 1, y1, np.nan)})
    hidden = pd.DataFrame({
        "Y(0)": y_pot[0], "Y(1)": y_pot[1], "S(0)": s_pot[0], "S(1)": s_pot[1],
        "stratum": _strata(s_pot[0], s_pot[1]), "U_0": u0, "U_1": u1, "V": vv,
    })
    return SimulatedDataset(spec, observed, hidden, Roles("D", "S", "Y_1_star", ("Y_0",)))


# -- custom graphs ----------------------------------------------------------------

def _custom(spec: ScmSpec) -> SimulatedDataset:
    g: MGraph = parse_graph(spec.graph)
    h = expand_latents(g)
    p = spec.params
    rng = np.random.default_rng(spec.seed)
    n = spec.n
    treatment = spec.options.get("treatment", "D" if "D" in g and g.kind("D") is NodeKind.OBSERVED else None)
    order = [v for v in h.topological_order() if h.kind(v) is not NodeKind.PROXY]
    noise = {v: (rng.random(n) if h.kind(v) is NodeKind.SELECTION or v == treatment else rng.standard_normal(n)) for v in order}

    def coef(a, b):
        return float(p.get(f"{a}->{b}", p["default_coef"]))

    def run(fixed):
        vals = {}
        for v in order:
            lin = float(p.get(v, 0.0)) + sum(coef(a, v) * (fixed if a == treatment and fixed is not None else vals[a]) for a in h.parents(v))
            if v == treatment:
                vals[v] = (noise[v] < expit(lin)).astype(float)
            elif h.kind(v) is NodeKind.SELECTION:
                vals[v] = (noise[v] < expit(lin)).astype(float)
            else:
                vals[v] = lin + p["sigma"] * noise[v]
        return vals

    factual = run(None)
    observed = pd.DataFrame()
    for v in g.nodes:
        kind = g.kind(v)
        if kind in (NodeKind.OBSERVED, NodeKind.SELECTION):
            observed[v] = factual[v].astype(int) if kind is NodeKind.SELECTION or v == treatment else factual[v]
        elif kind is NodeKind.PROXY:
            src, sel = g.proxy_source(v)
            observed[v] = np.where(factual[sel] == 1, factual[src], np.nan)
    hidden = pd.DataFrame({v: factual[v] for v in order if h.kind(v) in (NodeKind.LATENT, NodeKind.PARTIALLY_MISSING)})
    if treatment is not None:
        for arm in (0, 1):
            pot = run(float(arm))
            for v in g.nodes_of(NodeKind.PARTIALLY_MISSING, NodeKind.SELECTION):
                hidden[f"{v}({arm})"] = pot[v]
    sels = g.nodes_of(NodeKind.SELECTION)
    roles = Roles(
        treatment or g.nodes_of(NodeKind.OBSERVED)[0],
        sels[0] if len(sels) == 1 else None,
        g.proxy_for(g.selection_of[sels[0]]) if len(sels) == 1 else None,
        tuple(v for v in g.nodes_of(NodeKind.OBSERVED) if v != treatment),
    )
    if roles.selection is None:
        roles = Roles(roles.treatment, covariates=roles.covariates)
    return SimulatedDataset(spec, observed, hidden, roles)


def simulate(spec: ScmSpec) -> SimulatedDataset:
    """Draw one dataset; identical specs give identical frames."""
    if spec.template == "M4Panel":
        sim = _panel(spec)
    elif spec.template == "Custom":
        sim = _custom(spec)
    else:
        sim = _linear_family(spec)
    numeric = sim.observed.select_dtypes(include=[float]).to_numpy()
    if not np.all(np.isfinite(numeric[~np.isnan(numeric)])):
        raise ValueError("non-finite draws; check scale parameters")
    return sim


def oracle(sim: SimulatedDataset, kind: str, d: int | None = None) -> float:
    """Finite-sample estimand computed from the hidden potential outcomes."""
    h = sim.hidden
    effect = h["Y(1)"] - h["Y(0)"]
    if kind == "ATE":
        return float(effect.mean())
    if kind == "ATT":
        rows = sim.observed[sim.roles.treatment] == 1
    elif kind == "AlwaysObservedATE":
        rows = (h["S(0)"] == 1) & (h["S(1)"] == 1)
    elif kind == "CounterfactualMean":
        if d not in (0, 1):
            raise ValueError("counterfactual means need d in {0, 1}")
        return float(h[f"Y({d})"].mean())
    else:
        raise ValueError(f"unknown estimand {kind!r}")
    if not rows.any():
        raise ValueError(f"empty stratum for {kind}")
    return float(effect[rows.to_numpy()].mean())


# -- oracle nuisances -------------------------------------------------------------

_GH_X, _GH_W = np.polynomial.hermite_e.hermegauss(40)
_GH_W = _GH_W / _GH_W.sum()
_GL_X, _GL_W = np.polynomial.legendre.leggauss(60)


class OracleNuisances:
    """Population nuisance functions of an M1-M3 template, evaluated row by row.

    The latent U is integrated out with Gauss-Hermite quadrature given X
    (Gauss-Legendre over the half line for binary X).  Work is done once per
    distinct covariate row and in row chunks, which bounds memory.
    """

    CHUNK = 4096

    def __init__(self, spec: ScmSpec, frame: pd.DataFrame):
        self.spec = spec
        self.p = spec.params
        n = len(frame)
        cols = [frame[c].to_numpy(dtype=float) if c in frame else np.zeros(n) for c in ("X", "Z", "G")]
        uniq, inv = np.unique(np.column_stack(cols), axis=0, return_inverse=True)
        self._inv = inv.ravel()
        self.x, self.z, self.g = uniq.T
        self.n = n

    def _u_nodes(self, idx):
        m = len(idx)
        if self.spec.template != "M3" or self.p["au"] == 0 and self.p["bu"] == 0:
            return np.zeros((m, 1)), np.ones((m, 1))
        r = self.p["xu_corr"]
        sd = np.sqrt(1 - r * r)
        x = self.x[idx]
        if self.spec.options.get("x_dist", "normal") != "binary":
            return r * x[:, None] + sd * _GH_X[None, :], np.broadcast_to(_GH_W, (m, len(_GH_W)))
        # latent X* given its sign: map Legendre nodes on (0.5, 1) through the normal quantile
        xl = norm.ppf(0.75 + 0.25 * _GL_X)
        wl = _GL_W / _GL_W.sum()
        u = (r * xl[:, None] + sd * _GH_X[None, :]).ravel()
        w = (wl[:, None] * _GH_W[None, :]).ravel()
        sign = np.where(x > 0, 1.0, -1.0)
        return sign[:, None] * u[None, :], np.broadcast_to(w, (m, len(w)))

    def _per_row(self, fn, *row_args):
        """Apply ``fn(idx, *args)`` over chunks of rows; idx indexes distinct covariate rows."""
        if not row_args:
            distinct = np.arange(len(self.x))
            values = np.concatenate([fn(distinct[i:i + self.CHUNK]) for i in range(0, len(distinct), self.CHUNK)])
            return values[self._inv]
        out = np.empty(self.n)
        row_args =[np.broadcast_to(np.asarray(a, float), (self.n,)) for a in row_args]
        for start in range(0, self.n, self.CHUNK):
            sl = slice(start, start + self.CHUNK)
            out[sl] = fn(self._inv[sl], *(a[sl] for a in row_args))
        return out

    def propensity(self) -> np.ndarray:
        p = self.p
        return expit(p["g0"] + p["gx"] * self.x + p["gz"] * self.z)[self._inv]

    def _sel_node(self, d, idx, nodes):
        p = self.p
        ad = p["ad"] * (1 - 2 * self.g[idx])
        base = p["a0"] + p["ax"] * self.x[idx] + p["az"] * self.z[idx] + ad * d
        return expit(base[:, None] + p["au"] * nodes)

    def _mix(self, d, idx):
        nodes, weights = self._u_nodes(idx)
        sel = self._sel_node(d, idx, nodes)
        w = weights * sel
        p = self.p
        x, z = self.x[idx], self.z[idx]
        tau = p["tau"] + p["tau_x"] * x + p["tau_z"] * z
        mu = (p["b0"] + p["bx"] * x + p["bz"] * z + tau * d)[:, None] + p["bu"] * nodes
        return w.sum(axis=1), w / w.sum(axis=1, keepdims=True), mu

    def selection(self, d) -> np.ndarray:
        """P(S=1 | D=d, X)."""
        return self._per_row(lambda idx: self._mix(d, idx)[0])

    def mean(self, d) -> np.ndarray:
        """E[Y | S=1, D=d, X]."""
        return self._per_row(lambda idx: (lambda s, w, mu: (w * mu).sum(axis=1))(*self._mix(d, idx)))

    def cdf(self, d, y) -> np.ndarray:
        sig = self.p["sigma"]

        def fn(idx, yv):
            _, w, mu = self._mix(d, idx)
            return (w * norm.cdf((yv[:, None] - mu) / sig)).sum(axis=1)

        return self._per_row(fn, y)

    def quantile(self, d, u) -> np.ndarray:
        """Inf-quantile of Y given S=1, D=d, X at per-row level ``u`` (bisection); +inf at u >= 1."""
        sig = self.p["sigma"]

        def fn(idx, uv):
            _, w, mu = self._mix(d, idx)
            lo = mu.min(axis=1) - 12 * sig
            hi = mu.max(axis=1) + 12 * sig
            for _ in range(80):
                mid = 0.5 * (lo + hi)
                below = (w * norm.cdf((mid[:, None] - mu) / sig)).sum(axis=1) < uv
                lo = np.where(below, mid, lo)
                hi = np.where(below, hi, mid)
            return np.where(uv >= 1, np.inf, 0.5 * (lo + hi))

        return self._per_row(fn, u)

    def trimmed_mean(self, d, cut, upper=False) -> np.ndarray:
        """E[Y 1(Y <= cut) | S=1, D=d, X], or with ``Y >= cut`` when ``upper``."""
        sig = self.p["sigma"]

        def fn(idx, c):
            _, w, mu = self._mix(d, idx)
            zc = (c[:, None] - mu) / sig  # infinite cuts give zc = +-inf, which cdf/pdf handle exactly
            if upper:
                part = mu * norm.sf(zc) + sig * norm.pdf(zc)
            else:
                part = mu * norm.cdf(zc) - sig * norm.pdf(zc)
            return (w * part).sum(axis=1)

        return self._per_row(fn, cut)
