"""m-graph data model, text grammar, latent expansion and DOT export.

An m-graph is a DAG over five kinds of nodes.  Observed and latent nodes are
ordinary variables.  A partially missing variable ``v`` is paired with a
binary selection node ``s_v`` and a proxy ``v_star`` whose value equals ``v``
when ``s_v = 1`` and is missing otherwise.  Proxies are created automatically
from ``sel`` declarations and always have exactly the parents ``{v, s_v}``.

Text grammar (``#`` comments, statements separated by ``;`` or newlines)::

    node <id> (obs|miss|latent)
    sel <id> for <missId>
    edge <id> -> <id>
    bi <id> <-> <id>
"""

from __future__ import annotations

import re
from enum import Enum
from typing import Iterable, Mapping

__all__ = [
    "NodeKind",
    "MGraph",
    "GraphError",
    "GraphSyntaxError",
    "make_graph",
    "parse_graph",
    "expand_latents",
    "ancestors",
    "descendants",
    "to_dot",
    "PROXY_SUFFIX",
]

PROXY_SUFFIX = "_star"
_NAME = re.compile(r"[A-Za-z][A-Za-z0-9_]*\Z")
_TOKEN = re.compile(r"<->|->|[A-Za-z0-9_]+|\S")


class NodeKind(str, Enum):
    OBSERVED = "obs"
    PARTIALLY_MISSING = "miss"
    PROXY = "proxy"
    SELECTION = "sel"
    LATENT = "latent"


class GraphError(ValueError):
    """Semantic violation of an m-graph invariant."""


class GraphSyntaxError(GraphError):
    def __init__(self, message: str, line: int, column: int):
        super().__init__(f"line {line}, column {column}: {message}")
        self.line = line
        self.column = column


class MGraph:
    """Immutable, validated m-graph.

    Use :func:`make_graph` or :func:`parse_graph` rather than calling the
    constructor directly; both auto-create proxy nodes.
    """

    __slots__ = ("_kinds", "_edges", "_bidirected", "_selection_of", "_parents", "_children", "_order")

    def __init__(
        self,
        kinds: Mapping[str, NodeKind],
        edges: Iterable[tuple[str, str]],
        bidirected: Iterable[tuple[str, str]],
        selection_of: Mapping[str, str],
    ):
        self._kinds = dict(sorted(kinds.items()))
        self._edges = frozenset(edges)
        self._bidirected = frozenset(tuple(sorted(p)) for p in bidirected)
        self._selection_of = dict(sorted(selection_of.items()))
        self._parents = {v: [] for v in self._kinds}
        self._children = {v: [] for v in self._kinds}
        for a, b in sorted(self._edges):
            if a not in self._kinds or b not in self._kinds:
                missing = a if a not in self._kinds else b
                raise GraphError(f"edge {a} -> {b} references unknown node {missing}")
            self._children[a].append(b)
            self._parents[b].append(a)
        self._parents = {k: tuple(v) for k, v in self._parents.items()}
        self._children = {k: tuple(v) for k, v in self._children.items()}
        self._order = None
        self._validate()

    # -- identity -------------------------------------------------------
    def _key(self):
        return (tuple(self._kinds.items()), self._edges, self._bidirected, tuple(self._selection_of.items()))

    def __eq__(self, other):
        return isinstance(other, MGraph) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __repr__(self):
        return f"MGraph(nodes={len(self._kinds)}, edges={len(self._edges)}, bidirected={len(self._bidirected)})"

    # -- accessors ------------------------------------------------------
    @property
    def nodes(self) -> tuple[str, ...]:
        return tuple(self._kinds)

    @property
    def edges(self) -> frozenset[tuple[str, str]]:
        return self._edges

    @property
    def bidirected(self) -> frozenset[tuple[str, str]]:
        return self._bidirected

    @property
    def selection_of(self) -> dict[str, str]:
        """Map selection node -> partially missing variable it governs."""
        return dict(self._selection_of)

    def __contains__(self, name) -> bool:
        return name in self._kinds

    def kind(self, name: str) -> NodeKind:
        try:
            return self._kinds[name]
        except KeyError:
            raise GraphError(f"unknown node {name!r}") from None

    def nodes_of(self, *kinds: NodeKind) -> tuple[str, ...]:
        return tuple(v for v, k in self._kinds.items() if k in kinds)

    def parents(self, name: str) -> tuple[str, ...]:
        self.kind(name)
        return self._parents[name]

    def children(self, name: str) -> tuple[str, ...]:
        self.kind(name)
        return self._children[name]

    def selection_for(self, missing: str) -> str:
        for s, v in self._selection_of.items():
            if v == missing:
                return s
        raise GraphError(f"{missing!r} has no selection node")

    def proxy_for(self, missing: str) -> str:
        if self.kind(missing) is not NodeKind.PARTIALLY_MISSING:
            raise GraphError(f"{missing!r} is not partially missing")
        return missing + PROXY_SUFFIX

    def proxy_source(self, proxy: str) -> tuple[str, str]:
        """Return ``(missing variable, selection node)`` behind a proxy."""
        if self.kind(proxy) is not NodeKind.PROXY:
            raise GraphError(f"{proxy!r} is not a proxy")
        missing = proxy[: -len(PROXY_SUFFIX)]
        return missing, self.selection_for(missing)

    def topological_order(self) -> tuple[str, ...]:
        if self._order is None:
            indeg = {v: len(p) for v, p in self._parents.items()}
            ready = sorted(v for v, d in indeg.items() if d == 0)
            order = []
            while ready:
                v = ready.pop(0)
                order.append(v)
                for c in self._children[v]:
                    indeg[c] -= 1
                    if indeg[c] == 0:
                        ready.append(c)
                ready.sort()
            self._order = tuple(order)
        return self._order

    # -- derived graphs -------------------------------------------------
    def without_edges(self, removed: Iterable[tuple[str, str]]) -> "MGraph":
        """Copy with the given directed edges dropped (absent edges are ignored)."""
        removed = set(removed)
        return MGraph(self._kinds, self._edges - removed, self._bidirected, self._selection_of)

    def without_bidirected(self, removed: Iterable[tuple[str, str]]) -> "MGraph":
        removed = {tuple(sorted(p)) for p in removed}
        return MGraph(self._kinds, self._edges, self._bidirected - removed, self._selection_of)

    def serialize(self) -> str:
        lines = []
        for v, k in self._kinds.items():
            if k in (NodeKind.OBSERVED, NodeKind.PARTIALLY_MISSING, NodeKind.LATENT):
                lines.append(f"node {v} {k.value}")
        for s, v in self._selection_of.items():
            lines.append(f"sel {s} for {v}")
        for a, b in sorted(self._edges):
            if self._kinds[b] is not NodeKind.PROXY:
                lines.append(f"edge {a} -> {b}")
        for a, b in sorted(self._bidirected):
            lines.append(f"bi {a} <-> {b}")
        return "\n".join(lines) + "\n"

    # -- validation -----------------------------------------------------
    def _validate(self):
        for v in self._kinds:
            if not _NAME.match(v):
                raise GraphError(f"invalid node name {v!r}")
        for a, b in self._edges:
            if a == b:
                raise GraphError(f"self-loop on {a}")
        for a, b in self._bidirected:
            if a == b:
                raise GraphError(f"bidirected self-loop on {a}")
            for v in (a, b):
                k = self.kind(v)
                if k is NodeKind.PROXY:
                    raise GraphError(f"bidirected edge touches proxy {v}")
        governed = {}
        for s, v in self._selection_of.items():
            if self.kind(s) is not NodeKind.SELECTION:
                raise GraphError(f"{s} is declared as selection but has kind {self.kind(s).value}")
            if self.kind(v) is not NodeKind.PARTIALLY_MISSING:
                raise GraphError(f"selection {s} targets {v}, which is not partially missing")
            if v in governed:
                raise GraphError(f"{v} has two selection nodes ({governed[v]}, {s})")
            governed[v] = s
        for v, k in self._kinds.items():
            if k is NodeKind.SELECTION and v not in self._selection_of:
                raise GraphError(f"selection node {v} governs no variable")
            if k is NodeKind.PARTIALLY_MISSING:
                if v not in governed:
                    raise GraphError(f"partially missing {v} has no selection node")
                proxy = v + PROXY_SUFFIX
                if self._kinds.get(proxy) is not NodeKind.PROXY:
                    raise GraphError(f"partially missing {v} has no proxy {proxy}")
                if set(self._parents[proxy]) != {v, governed[v]}:
                    raise GraphError(f"proxy {proxy} must have exactly the parents {{{v}, {governed[v]}}}")
            if k is NodeKind.PROXY:
                base = v[: -len(PROXY_SUFFIX)] if v.endswith(PROXY_SUFFIX) else None
                if base is None or self._kinds.get(base) is not NodeKind.PARTIALLY_MISSING:
                    raise GraphError(f"dangling proxy {v}")
                if self._children[v]:
                    raise GraphError(f"proxy {v} has outgoing edges")
        if len(self.topological_order()) != len(self._kinds):
            stuck = sorted(set(self._kinds) - set(self.topological_order()))
            raise GraphError(f"directed cycle among {', '.join(stuck)}")


def make_graph(
    *,
    observed: Iterable[str] = (),
    missing: Iterable[str] = (),
    latent: Iterable[str] = (),
    selections: Mapping[str, str] | None = None,
    edges: Iterable[tuple[str, str]] = (),
    bidirected: Iterable[tuple[str, str]] = (),
) -> MGraph:
    """Build a validated m-graph; ``selections`` maps selection node -> missing variable."""
    kinds: dict[str, NodeKind] = {}

    def add(name, kind):
        if name in kinds:
            raise GraphError(f"duplicate node {name}")
        kinds[name] = kind

    for v in observed:
        add(v, NodeKind.OBSERVED)
    for v in missing:
        add(v, NodeKind.PARTIALLY_MISSING)
    for v in latent:
        add(v, NodeKind.LATENT)
    edges = list(edges)
    selections = dict(selections or {})
    for s, v in selections.items():
        add(s, NodeKind.SELECTION)
        add(v + PROXY_SUFFIX, NodeKind.PROXY)
        edges += [(v, v + PROXY_SUFFIX), (s, v + PROXY_SUFFIX)]
    if len(set(edges)) != len(edges):
        dup = next(e for e in edges if edges.count(e) > 1)
        raise GraphError(f"duplicate edge {dup[0]} -> {dup[1]}")
    for a, b in edges:
        if a == b:
            raise GraphError(f"self-loop on {a}")
        for v in (a, b):
            if v not in kinds:
                raise GraphError(f"edge {a} -> {b} references unknown node {v}")
        if kinds[b] is NodeKind.PROXY and not (
            b == a + PROXY_SUFFIX or selections.get(a) == b[: -len(PROXY_SUFFIX)]
        ):
            raise GraphError(f"edge {a} -> {b} points into a proxy")
    pairs = [tuple(sorted(p)) for p in bidirected]
    if len(set(pairs)) != len(pairs):
        raise GraphError("duplicate bidirected edge")
    for a, b in pairs:
        for v in (a, b):
            if v not in kinds:
                raise GraphError(f"bidirected edge {a} <-> {b} references unknown node {v}")
    return MGraph(kinds, edges, pairs, selections)


def _statements(text: str):
    """Yield ``(tokens, line, col)`` per statement; tokens are ``(text, col)``."""
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0]
        start = 0
        for chunk in line.split(";"):
            toks = [(m.group(), start + m.start() + 1) for m in _TOKEN.finditer(chunk)]
            if toks:
                yield toks, lineno
            start += len(chunk) + 1


def parse_graph(text: str) -> MGraph:
    """Parse the line-oriented graph grammar into a validated :class:`MGraph`."""
    kinds_by_word = {"obs": "observed", "miss": "missing", "latent": "latent"}
    declared: dict[str, list[str]] = {"observed": [], "missing": [], "latent": []}
    seen: dict[str, tuple[int, int]] = {}
    selections: dict[str, str] = {}
    edges: list[tuple[str, str]] = []
    bidirected: list[tuple[str, str]] = []
    refs: list[tuple[str, int, int]] = []

    def ident(tok, line):
        word, col = tok
        if not _NAME.match(word):
            raise GraphSyntaxError(f"expected identifier, found {word!r}", line, col)
        return word

    def declare(tok, line):
        name = ident(tok, line)
        if name in seen:
            raise GraphSyntaxError(f"duplicate node {name} (first declared at line {seen[name][0]})", line, tok[1])
        seen[name] = (line, tok[1])
        return name

    def expect(toks, i, word, line):
        if i >= len(toks):
            col = toks[-1][1] + len(toks[-1][0])
            raise GraphSyntaxError(f"expected {word!r}, found end of statement", line, col)
        if toks[i][0] != word:
            raise GraphSyntaxError(f"expected {word!r}, found {toks[i][0]!r}", line, toks[i][1])

    shapes = {"node": 3, "sel": 4, "edge": 4, "bi": 4}
    for toks, line in _statements(text):
        head, col = toks[0]
        if head not in shapes:
            raise GraphSyntaxError(f"unknown statement {head!r}", line, col)
        want = shapes[head]
        if len(toks) > want:
            raise GraphSyntaxError(f"unexpected token {toks[want][0]!r}", line, toks[want][1])
        if head == "node":
            if len(toks) < 3:
                col = toks[-1][1] + len(toks[-1][0])
                raise GraphSyntaxError("expected node kind (obs|miss|latent)", line, col)
            name = declare(toks[1], line)
            if toks[2][0] not in kinds_by_word:
                raise GraphSyntaxError(f"unknown node kind {toks[2][0]!r}", line, toks[2][1])
            declared[kinds_by_word[toks[2][0]]].append(name)
        elif head == "sel":
            expect(toks, 2, "for", line)
            if len(toks) < 4:
                raise GraphSyntaxError("expected identifier after 'for'", line, toks[2][1] + 3)
            s = declare(toks[1], line)
            v = ident(toks[3], line)
            refs.append((v, line, toks[3][1]))
            if v in selections.values():
                raise GraphSyntaxError(f"{v} already has a selection node", line, toks[3][1])
            selections[s] = v
            declare((v + PROXY_SUFFIX, toks[3][1]), line)
        else:
            arrow = "->" if head == "edge" else "<->"
            expect(toks, 2, arrow, line)
            if len(toks) < 4:
                raise GraphSyntaxError("expected identifier after arrow", line, toks[2][1] + len(arrow))
            a, b = ident(toks[1], line), ident(toks[3], line)
            refs += [(a, line, toks[1][1]), (b, line, toks[3][1])]
            if a == b:
                raise GraphSyntaxError(f"self-loop on {a}", line, toks[1][1])
            target = edges if head == "edge" else bidirected
            pair = (a, b) if head == "edge" else tuple(sorted((a, b)))
            if pair in target:
                raise GraphSyntaxError(f"duplicate edge {a} {arrow} {b}", line, col)
            target.append(pair)
    for name, line, col in refs:
        if name not in seen:
            raise GraphSyntaxError(f"unknown node {name}", line, col)
    return make_graph(
        observed=declared["observed"],
        missing=declared["missing"],
        latent=declared["latent"],
        selections=selections,
        edges=edges,
        bidirected=bidirected,
    )


def expand_latents(g: MGraph) -> MGraph:
    """Replace every bidirected edge by a fresh latent parent ``L_1, L_2, ...``."""
    if not g.bidirected:
        return g
    kinds = {v: g.kind(v) for v in g.nodes}
    edges = set(g.edges)
    i = 0
    for a, b in sorted(g.bidirected):
        i += 1
        while f"L_{i}" in kinds:
            i += 1
        name = f"L_{i}"
        kinds[name] = NodeKind.LATENT
        edges |= {(name, a), (name, b)}
    return MGraph(kinds, edges, (), g.selection_of)


def _closure(g: MGraph, targets, step) -> set[str]:
    targets = set(targets)
    for t in targets:
        g.kind(t)
    seen = set(targets)
    stack = list(targets)
    while stack:
        for w in step(stack.pop()):
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return seen


def ancestors(g: MGraph, targets: Iterable[str]) -> set[str]:
    """Reflexive ancestors of ``targets``, counting latents introduced by expansion."""
    h = expand_latents(g)
    return _closure(h, targets, h.parents)


def descendants(g: MGraph, targets: Iterable[str]) -> set[str]:
    return _closure(g, targets, g.children)


def to_dot(g: MGraph, name: str = "mgraph") -> str:
    """Graphviz rendering for visual inspection (not a round-trip format)."""
    style = {
        NodeKind.OBSERVED: "shape=ellipse",
        NodeKind.PARTIALLY_MISSING: "shape=ellipse, style=filled, fillcolor=lightgrey",
        NodeKind.PROXY: "shape=doublecircle",
        NodeKind.SELECTION: "shape=box",
        NodeKind.LATENT: "shape=ellipse, style=dashed",
    }
    out = [f"digraph {name} {{"]
    for v in g.nodes:
        out.append(f'  "{v}" [{style[g.kind(v)]}];')
    for a, b in sorted(g.edges):
        out.append(f'  "{a}" -> "{b}";')
    for a, b in sorted(g.bidirected):
        out.append(f'  "{a}" -> "{b}" [style=dashed, dir=both];')
    out.append("}")
    return "\n".join(out) + "\n"
