"""Command-line interface: ``mswig <verb> [options]``.

Exit codes: 0 success, 1 invalid input (graph, roles, data), 2 estimation failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys

import pandas as pd

from . import __version__
from .citest import TestError, test_catalog
from .data import DataError, Roles, dumps_json, read_csv, write_csv, write_text_atomic
from .estimators import ESTIMANDS, MODELS, EstimationError, estimate, heterogeneous_effects, overlap_report
from .graph import GraphError, parse_graph
from .identification import (
    BUILTIN_GRAPHS,
    PANEL_VARIANTS,
    Assumption,
    EstimandSpec,
    ImplicationCatalog,
    attrition_catalog,
    builtin_graph,
    panel_catalog,
    plan_identification,
)
from .learners import parse_learners
from .missingness import classify
from .separation import enumerate_independencies, minimal_testable_set
from .simulate import ScmSpec, TEMPLATE_DEFAULTS, simulate
from .swig import counterfactual_independencies, split

log = logging.getLogger("mswig")

ESTIMAND_KINDS = {
    "ate": "ATE",
    "att": "ATT",
    "always-observed": "AlwaysObservedATE",
    "counterfactual-mean": "CounterfactualMean",
}


class UsageError(ValueError):
    pass


# -- input helpers ------------------------------------------------------------------

def _json_arg(value, what):
    """Inline JSON, or a path to a JSON file."""
    if value is None:
        return None
    if os.path.exists(value):
        with open(value, encoding="utf-8") as fh:
            text = fh.read()
    else:
        text = value
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"--{what}: not valid JSON or an existing file ({exc.msg})") from None


def load_graph(ref: str):
    """A graph file path, or the name of a built-in graph (``M2``, ``M4:ExclusionII``)."""
    if os.path.exists(ref):
        with open(ref, encoding="utf-8") as fh:
            return parse_graph(fh.read())
    name, _, variant = ref.partition(":")
    if name.upper() == "M4" and variant:
        from .identification import m4_graph

        return m4_graph(variant)
    if name.upper() in BUILTIN_GRAPHS:
        return builtin_graph(name)
    raise UsageError(f"graph {ref!r} is neither a file nor a built-in graph ({', '.join(sorted(BUILTIN_GRAPHS))})")


def _need(args, *names):
    for n in names:
        if getattr(args, n) is None:
            raise UsageError(f"--{n.replace('_', '-')} is required for {args.verb}")


def _dataset(args):
    _need(args, "data", "roles")
    return read_csv(args.data, Roles.from_dict(_json_arg(args.roles, "roles")))


def _csv_list(value):
    return [v.strip() for v in value.split(",") if v.strip()] if value else []


def config_hash(args) -> str:
    cfg = {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "out")}
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- output -------------------------------------------------------------------------

def emit(args, payload, frame: pd.DataFrame | None = None, text: str | None = None):
    fmt = args.format
    if fmt == "csv":
        if frame is None:
            raise UsageError(f"{args.verb} has no CSV form; use --format json")
        out = frame.to_csv(index=False, na_rep="NA", float_format="%.17g", lineterminator="\n")
    elif fmt == "text":
        out = text if text is not None else dumps_json(payload)
    else:
        out = dumps_json(payload)
    if args.out:
        if fmt == "csv":
            write_csv(args.out, frame)
        else:
            write_text_atomic(args.out, out)
    else:
        sys.stdout.write(out)


def _statement_frame(statements):
    return pd.DataFrame({"statement": [str(s) for s in statements]})


# -- verbs --------------------------------------------------------------------------

def cmd_derive(args):
    _need(args, "graph")
    g = load_graph(args.graph)
    if args.minimal:
        sts = minimal_testable_set(g, args.max_conditioning)
    else:
        sts = enumerate_independencies(g, args.scope, args.max_conditioning)
    lines = [str(s) for s in sts]
    emit(args, {"statements": lines}, _statement_frame(sts), "\n".join(lines) + "\n")


def _intervention(items):
    out = {}
    for item in items:
        node, _, sym = item.partition("=")
        out[node.strip()] = sym.strip() or node.strip().lower()
    return out


def cmd_swig(args):
    _need(args, "graph")
    g = load_graph(args.graph)
    iv = _intervention(args.intervene or ["D"])
    sw = split(g, iv)
    sts = counterfactual_independencies(g, iv, args.max_conditioning)
    payload = {"graph": sw.describe(), "independencies": [str(s) for s in sts]}
    text = "\n".join(sw.describe() + [""] + payload["independencies"]) + "\n"
    emit(args, payload, _statement_frame(sts), text)


def cmd_classify(args):
    _need(args, "graph")
    g = load_graph(args.graph)
    subset = _csv_list(args.subset) or sorted(g.selection_of)
    v = classify(g, subset)
    emit(args, v.to_dict(), pd.DataFrame([v.to_dict()]).assign(subset=",".join(map(str, v.subset))),
         f"{','.join(map(str, v.subset))}: {v.category}\n")


def cmd_check(args):
    _need(args, "graph")
    g = load_graph(args.graph)
    kind = ESTIMAND_KINDS[args.estimand]
    spec = EstimandSpec(kind, args.treatment, args.outcome, tuple(_csv_list(args.adjust)))
    assumptions = tuple(Assumption(a) for a in _csv_list(args.assume))
    plan = plan_identification(g, spec, assumptions)
    text = f"{plan.status} ({plan.strategy})\n{plan.formula or plan.reason}\n"
    emit(args, plan.to_dict(), None, text)


def cmd_implications(args):
    if args.panel:
        cat = panel_catalog(None if args.panel == "all" else args.panel)
    else:
        _need(args, "graph")
        cat = attrition_catalog(load_graph(args.graph), randomized=args.randomized, treatment=args.treatment)
    frame = pd.DataFrame(
        [{"entry": e.name, "kind": kind, "statement": str(s)}
         for e in cat.entries for kind, sts in (("implied", e.implied), ("untestable", e.untestable),
                                                 ("counterfactual", e.counterfactual)) for s in sts],
        columns=["entry", "kind", "statement"],
    )
    emit(args, cat.to_dict(), frame, cat.to_text())


def cmd_test(args):
    ds = read_csv(args.data)
    if args.catalog:
        g = load_graph(args.graph) if args.graph else None
        cat = ImplicationCatalog.from_dict(_json_arg(args.catalog, "catalog"), g)
    elif args.graph:
        cat = minimal_testable_set(load_graph(args.graph))
    else:
        raise UsageError("test needs --catalog or --graph")
    options = {"permutations": args.permutations}
    res = test_catalog(ds, cat, args.method, args.alpha, args.multiplicity, options, args.seed)
    emit(args, res.to_dict(), res.to_frame())


def estimate_payload(ds, model, estimand, learners, folds, seed, alpha) -> dict:
    """The JSON document written by ``mswig estimate`` (also usable from Python)."""
    signal, result = estimate(ds, model, estimand, learners, folds, seed, alpha)
    payload = {"model": model, "unconditional": result.to_dict(), "heterogeneity": []}
    for col in ds.roles.heterogeneity:
        groups = heterogeneous_effects(signal, ds.frame[col].to_numpy(), "Indicators", alpha)
        payload["heterogeneity"].append({
            "variable": col,
            "groups": [{"value": g.group[0], "weight": g.weight, **g.result.to_dict()} for g in groups],
        })
    return payload


def _estimate_frame(payload):
    rows = []

    def row(block, variable, value, weight):
        r = {"variable": variable, "value": value, "weight": weight}
        if "interval" in block:
            r.update(point=None, lower=block["interval"][0], upper=block["interval"][1])
        else:
            r.update(point=block["point"], lower=None, upper=None)
        r.update(ci_low=block["ci"][0], ci_high=block["ci"][1], n=block["n"])
        return r

    rows.append(row(payload["unconditional"], "all", None, 1.0))
    for h in payload["heterogeneity"]:
        for g in h["groups"]:
            rows.append(row(g, h["variable"], g["value"], g["weight"]))
    return pd.DataFrame(rows)


def cmd_estimate(args):
    ds = _dataset(args)
    _need(args, "model", "estimand")
    learners = parse_learners(_json_arg(args.learners, "learners"))
    payload = estimate_payload(ds, args.model, args.estimand, learners, args.folds, args.seed, args.alpha)
    emit(args, payload, _estimate_frame(payload))


def cmd_overlap(args):
    ds = _dataset(args)
    learners = parse_learners(_json_arg(args.learners, "learners"))
    rep = overlap_report(ds, learners, args.folds, args.seed)
    emit(args, rep.to_dict(), rep.to_csv_frame())


def cmd_simulate(args):
    _need(args, "out")
    coefs = {}
    for item in args.coef or []:
        k, _, v = item.partition("=")
        try:
            coefs[k.strip()] = float(v)
        except ValueError:
            raise UsageError(f"--coef {item!r}: expected name=number") from None
    options = _json_arg(args.options, "options") or {}
    graph_text = None
    if args.template == "Custom":
        _need(args, "graph")
        with open(args.graph, encoding="utf-8") as fh:
            graph_text = fh.read()
    spec = ScmSpec(args.template, args.n, args.seed, coefs, options, graph_text)
    simulate(spec).write(args.out)


# -- parser -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mswig", description="Causal graphs with missing data: derive, test, estimate.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="verb", required=True)

    def verb(name, func, help_, formats=("json", "csv", "text"), default="json"):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        sp.add_argument("--out", help="output path (default: stdout)")
        sp.add_argument("--format", choices=formats, default=default)
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    def graph_arg(sp):
        sp.add_argument("--graph", help="graph file or built-in name (M1, M2, M3, M4, M4:ExclusionII, FIG1, FIG6)")

    def data_args(sp):
        sp.add_argument("--data", help="CSV file; empty fields and NA are missing")
        sp.add_argument("--roles", help="column roles as JSON or a JSON file")
        sp.add_argument("--learners", help="learner slots as JSON or a JSON file")
        sp.add_argument("--folds", type=int, default=10)
        sp.add_argument("--alpha", type=float, default=0.05)

    sp = verb("derive", cmd_derive, "list implied independencies", default="text")
    graph_arg(sp)
    sp.add_argument("--scope", choices=["observed", "all"], default="all")
    sp.add_argument("--max-conditioning", type=int, help="largest conditioning set (default: min(4, node count))")
    sp.add_argument("--minimal", action="store_true", help="only a minimal testable set")

    sp = verb("swig", cmd_swig, "node-split a graph and list counterfactual independencies", default="text")
    graph_arg(sp)
    sp.add_argument("--intervene", action="append", metavar="NODE[=symbol]")
    sp.add_argument("--max-conditioning", type=int, help="largest conditioning set (default: min(4, node count))")

    sp = verb("classify-missingness", cmd_classify, "MCAR / MAR / MNAR verdict for selection nodes", default="text")
    graph_arg(sp)
    sp.add_argument("--subset", help="comma-separated selection nodes (default: all)")

    sp = verb("check-identification", cmd_check, "identification plan for an estimand", ("json", "text"))
    graph_arg(sp)
    sp.add_argument("--estimand", choices=sorted(ESTIMAND_KINDS), default="ate")
    sp.add_argument("--treatment", default="D")
    sp.add_argument("--outcome", default="Y")
    sp.add_argument("--adjust", help="comma-separated adjustment set")
    sp.add_argument("--assume", help="comma-separated assumptions: " + ", ".join(a.value for a in Assumption))

    sp = verb("implications", cmd_implications, "catalog of testable and untestable restrictions")
    graph_arg(sp)
    sp.add_argument("--randomized", action="store_true")
    sp.add_argument("--treatment")
    sp.add_argument("--panel", choices=[*PANEL_VARIANTS, "all"], help="two-period panel catalog instead of --graph")

    sp = verb("test", cmd_test, "test a catalog of independencies on data", ("json", "csv"))
    graph_arg(sp)
    sp.add_argument("--data", required=True)
    sp.add_argument("--catalog", help="catalog JSON (as written by implications) or a JSON file")
    sp.add_argument("--method", default="Auto", choices=["Auto", "ChiSquareStratified", "PartialRegressionWald", "Permutation"])
    sp.add_argument("--alpha", type=float, default=0.05)
    sp.add_argument("--multiplicity", choices=["None", "Bonferroni"], default="None")
    sp.add_argument("--permutations", type=int, default=999)

    sp = verb("estimate", cmd_estimate, "effect estimates or bounds", ("json", "csv"))
    data_args(sp)
    sp.add_argument("--model", choices=MODELS)
    sp.add_argument("--estimand", choices=ESTIMANDS)

    sp = verb("overlap", cmd_overlap, "selection-probability overlap diagnostics", ("json", "csv"))
    data_args(sp)

    sp = verb("simulate", cmd_simulate, "draw a synthetic dataset (writes PREFIX_observed.csv, _hidden.csv, _spec.json)")
    sp.add_argument("--template", choices=sorted(TEMPLATE_DEFAULTS), required=True)
    sp.add_argument("--n", type=int, default=2000)
    sp.add_argument("--coef", action="append", metavar="NAME=VALUE")
    sp.add_argument("--options", help="template options as JSON, e.g. {\"x_dist\": \"binary\"}")
    graph_arg(sp)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, format="%(name)s: %(message)s")
    log.info("%s config=%s seed=%s", args.verb, config_hash(args), args.seed)
    try:
        args.func(args)
    except EstimationError as exc:
        print(f"mswig {args.verb}: estimation failed: {exc}", file=sys.stderr)
        return 2
    except (UsageError, GraphError, DataError, TestError, ValueError, KeyError, OSError) as exc:
        print(f"mswig {args.verb}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
