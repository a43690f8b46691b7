"""Variable-based MCAR / MAR / MNAR classification of selection mechanisms."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable

from .graph import GraphError, NodeKind
from .separation import CIStatement, Term, d_separated, dag_view

__all__ = ["MissingnessVerdict", "classify"]


@dataclass(frozen=True)
class MissingnessVerdict:
    subset: tuple[Term, ...]
    category: str  # "MCAR", "MAR" or "MNAR"
    certifying: CIStatement | None = None
    violating: CIStatement | None = None

    def to_dict(self) -> dict:
        return {
            "subset": [str(t) for t in self.subset],
            "category": self.category,
            "certifying": str(self.certifying) if self.certifying else None,
            "violating": str(self.violating) if self.violating else None,
        }


def classify(g, subset: Iterable[str | Term]) -> MissingnessVerdict:
    """Classify the selection nodes in ``subset`` with respect to ``V_m`` and ``U``.

    MCAR: the subset is d-separated from all other non-proxy nodes.
    MAR: the subset is d-separated from partially missing and latent nodes
    given the observed nodes and the remaining selection nodes.
    Otherwise MNAR, reporting the first failing singleton query (missing
    variables before latents, each in name order).

    Works on an ``MGraph`` or on a ``SwigGraph``; in the latter case the
    subset may contain counterfactual selection terms such as ``S(d)``.
    """
    view = dag_view(g)
    keys = [view.resolve(t) for t in ([subset] if isinstance(subset, (str, Term)) else subset)]
    if not keys:
        raise GraphError("subset must be nonempty")
    for k in keys:
        if view.kinds[k] is not NodeKind.SELECTION:
            raise GraphError(f"{k} is not a selection node")
    chosen = set(keys)

    def pick(*kinds):
        return sorted(
            (v for v in view.terms if view.kinds[v] in kinds and v not in chosen),
            key=lambda v: view.terms[v].key,
        )

    observed = pick(NodeKind.OBSERVED, NodeKind.SELECTION)
    missing = pick(NodeKind.PARTIALLY_MISSING)
    # bidirected edges stand for unobserved common causes, so their latents belong to U
    latent = pick(NodeKind.LATENT) + sorted(view.auxiliary)

    def term(k):
        return view.terms.get(k) or Term(k)

    left = tuple(term(k) for k in keys)

    everything = observed + missing + latent
    if d_separated(g, keys, everything, (), witness=False).separated:
        return MissingnessVerdict(left, "MCAR", certifying=CIStatement(left, tuple(map(term, everything))))
    hidden = missing + latent
    if not hidden or d_separated(g, keys, hidden, observed, witness=False).separated:
        cert = CIStatement(left, tuple(map(term, hidden)), tuple(map(term, observed))) if hidden else None
        return MissingnessVerdict(left, "MAR", certifying=cert)
    for v in hidden:
        if not d_separated(g, keys, [v], observed, witness=False).separated:
            return MissingnessVerdict(left, "MNAR", violating=CIStatement(left, (term(v),), tuple(map(term, observed))))
    raise AssertionError("joint d-connection without a connected singleton")
