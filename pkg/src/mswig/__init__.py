"""Graphical causal inference when outcomes are partially missing.

Graphs with selection indicators (m-graphs), d-separation and SWIG
reasoning, identification plans, catalogs of testable restrictions,
conditional-independence tests, debiased estimators with cross-fitting,
trimming bounds and a structural simulator.
"""

__version__ = "0.1.0"

from .citest import CatalogResult, TestResult, paired_power_comparison, test_catalog, test_statement
from .data import DataError, Dataset, Roles, read_csv
from .estimators import (
    BoundsSignals,
    EstimateResult,
    EstimationError,
    MomentSignal,
    ate_aipw,
    att_aipw,
    att_m2,
    estimate,
    heterogeneous_effects,
    overlap_report,
    zr_lee_bounds,
)
from .graph import GraphError, GraphSyntaxError, MGraph, NodeKind, make_graph, parse_graph, to_dot
from .identification import (
    Assumption,
    EstimandKind,
    EstimandSpec,
    IdentificationPlan,
    ImplicationCatalog,
    attrition_catalog,
    builtin_graph,
    m4_graph,
    necessity_counterexample,
    panel_catalog,
    plan_identification,
)
from .learners import LearnerSpec, cross_fit, default_learners, fit
from .missingness import MissingnessVerdict, classify
from .separation import (
    CIStatement,
    Term,
    compact_statements,
    d_separated,
    enumerate_independencies,
    implies,
    minimal_testable_set,
    parse_statement,
    reduce_statements,
)
from .simulate import ScmSpec, SimulatedDataset, oracle, simulate
from .swig import SwigGraph, counterfactual_independencies, split

__all__ = [name for name in dir() if not name.startswith("_")]
