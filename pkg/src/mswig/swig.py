"""Single-world intervention graphs.

Splitting an intervened node ``D`` yields a random half, which keeps the
incoming edges, and a fixed half ``d``, which takes over the outgoing edges.
Every node reachable from a fixed half becomes counterfactual and carries
the intervention symbol as a label (``Y`` becomes ``Y(d)``).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

from .graph import GraphError, MGraph, NodeKind, expand_latents
from .separation import CIStatement, DagView, Term, enumerate_independencies

__all__ = ["SwigGraph", "split", "counterfactual_independencies"]


@dataclass(frozen=True, eq=False)
class SwigGraph:
    source: MGraph
    intervention: tuple[tuple[str, str], ...]
    terms: Mapping[str, Term]
    edges: frozenset

    @property
    def fixed(self) -> dict[str, str]:
        """Map intervened node -> value symbol."""
        return dict(self.intervention)

    def term(self, name: str) -> Term:
        try:
            return self.terms[name]
        except KeyError:
            raise GraphError(f"unknown node {name!r}") from None

    def kind(self, name: str) -> NodeKind:
        return self.source.kind(name)

    def nodes_of(self, *kinds: NodeKind) -> tuple[str, ...]:
        return self.source.nodes_of(*kinds)

    def describe(self) -> list[str]:
        """Human-readable node and edge listing."""
        lines = [f"fixed {sym} (from {v})" for v, sym in self.intervention]
        lines += [f"random {self.terms[v]}" for v in self.source.nodes]
        for a, b in sorted(self.edges):
            lines.append(f"edge {self._display(a)} -> {self._display(b)}")
        return lines

    def _display(self, key: str) -> str:
        if key.startswith("fixed:"):
            return self.fixed[key[6:]]
        return str(self.terms[key])

    def dag_view(self) -> DagView:
        h = expand_latents(self.source)
        targets = self.fixed
        parents = {v: tuple(p for p in h.parents(v) if p not in targets) for v in h.nodes}
        children = {v: () if v in targets else h.children(v) for v in h.nodes}
        proxy_sel = {p: self.source.proxy_source(p)[1] for p in self.source.nodes_of(NodeKind.PROXY)}
        return DagView(
            parents=parents,
            children=children,
            terms=dict(self.terms),
            kinds={v: h.kind(v) for v in h.nodes},
            auxiliary=frozenset(set(h.nodes) - set(self.source.nodes)),
            fixed={sym: v for v, sym in self.intervention},
            proxy_selection=proxy_sel,
        )


def split(g: MGraph, intervention: Mapping[str, str]) -> SwigGraph:
    """Node-split ``g`` at every target of ``intervention`` (node -> symbol).

    Examples
    --------
    >>> from mswig.graph import parse_graph
    >>> g = parse_graph("node X obs; node D obs; node Y obs; edge X -> D; edge D -> Y")
    >>> str(split(g, {"D": "d"}).term("Y"))
    'Y(d)'
    """
    if not intervention:
        raise GraphError("intervention must name at least one node")
    for v, sym in intervention.items():
        kind = g.kind(v)
        if kind in (NodeKind.PROXY, NodeKind.LATENT):
            raise GraphError(f"cannot intervene on {kind.name.lower()} node {v}")
        if not sym or not sym.isidentifier():
            raise GraphError(f"invalid intervention symbol {sym!r}")
        if sym in g:
            raise GraphError(f"intervention symbol {sym!r} clashes with a node name")
    if len(set(intervention.values())) != len(intervention):
        raise GraphError("intervention symbols must be distinct")
    order = {v: i for i, v in enumerate(g.topological_order())}
    ivs = tuple(sorted(intervention.items(), key=lambda kv: order[kv[0]]))
    targets = dict(ivs)

    reach: dict[str, set[str]] = {v: set() for v in g.nodes}
    for t, sym in ivs:
        stack = list(g.children(t))
        seen = set()
        while stack:
            v = stack.pop()
            if v in seen:
                continue
            seen.add(v)
            reach[v].add(t)
            if v not in targets:
                stack.extend(g.children(v))

    terms: dict[str, Term] = {}
    for v in g.topological_order():
        labels = tuple(sym for t, sym in ivs if t in reach[v])
        sel = g.kind(v) is NodeKind.SELECTION
        if g.kind(v) is NodeKind.PROXY:
            args = tuple(terms[p] for p in sorted(g.parents(v), key=lambda p: g.kind(p) is NodeKind.SELECTION) if terms[p].labels)
            terms[v] = Term(v, labels, args=args)
        else:
            terms[v] = Term(v, labels, selection=sel)

    edges = set()
    for a, b in g.edges:
        edges.add((f"fixed:{a}" if a in targets else a, b))
    return SwigGraph(g, ivs, terms, frozenset(edges))


def counterfactual_independencies(g: MGraph, intervention: Mapping[str, str], max_conditioning: int | None = None) -> list[CIStatement]:
    """Implied independencies of the SWIG, with counterfactual labels on the terms."""
    return enumerate_independencies(split(g, intervention), "all", max_conditioning)
