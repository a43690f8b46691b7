"""d-separation, enumeration of implied independencies and semi-graphoid pruning.

Queries accept either an :class:`~mswig.graph.MGraph` or a
:class:`~mswig.swig.SwigGraph`.  Bidirected edges are expanded to explicit
latent parents before any traversal, and the fixed halves of a SWIG are left
out of the traversal graph altogether, so every path through them is blocked.
"""

from __future__ import annotations

import itertools
import re
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Iterable, Sequence

from .graph import GraphError, MGraph, NodeKind, expand_latents

__all__ = [
    "Term",
    "CIStatement",
    "SeparationVerdict",
    "DagView",
    "dag_view",
    "d_separated",
    "enumerate_independencies",
    "minimal_testable_set",
    "reduce_statements",
    "compact_statements",
    "implies",
    "Closure",
    "parse_statement",
    "format_path",
]


@dataclass(frozen=True)
class Term:
    """A node reference with optional counterfactual labels, e.g. ``Y(d)``.

    ``selection`` and ``args`` only affect display (statement orientation and
    the nested proxy form ``Y_star(Y(d),S(d))``); equality uses name and labels.
    """

    name: str
    labels: tuple[str, ...] = ()
    selection: bool = field(default=False, compare=False)
    args: tuple["Term", ...] = field(default=(), compare=False)

    def __str__(self):
        if self.args:
            return f"{self.name}({','.join(map(str, self.args))})"
        if self.labels:
            return f"{self.name}({','.join(self.labels)})"
        return self.name

    @property
    def key(self):
        return (self.name, self.labels)


def _as_terms(items) -> tuple[Term, ...]:
    if isinstance(items, (str, Term)):
        items = [items]
    out = tuple(sorted((t if isinstance(t, Term) else Term(t) for t in items), key=lambda t: t.key))
    if len({t.key for t in out}) != len(out):
        raise GraphError("duplicate term in statement")
    return out


def _side_key(side: tuple[Term, ...]):
    return (len(side), 0 if any(t.selection for t in side) else 1, [t.key for t in side])


@dataclass(frozen=True, eq=False)
class CIStatement:
    """``left _||_ right | given [given S=1]``; equal to its left/right swap.

    ``events`` lists selection terms fixed at 1: the statement is meant to be
    checked on the selected stratum.  For d-separation purposes they act as
    additional conditioning variables.
    """

    left: tuple[Term, ...]
    right: tuple[Term, ...]
    given: tuple[Term, ...] = ()
    events: tuple[Term, ...] = ()

    def __post_init__(self):
        left, right = _as_terms(self.left), _as_terms(self.right)
        given, events = _as_terms(self.given), _as_terms(self.events)
        if not left or not right:
            raise GraphError("independence statement needs nonempty sides")
        sets = [{t.key for t in s} for s in (left, right, given, events)]
        for i, j in itertools.combinations(range(4), 2):
            if sets[i] & sets[j]:
                raise GraphError("statement sides must be disjoint")
        if _side_key(right) < _side_key(left):
            left, right = right, left
        object.__setattr__(self, "left", left)
        object.__setattr__(self, "right", right)
        object.__setattr__(self, "given", given)
        object.__setattr__(self, "events", events)

    @property
    def conditioned_on_selection(self) -> bool:
        return bool(self.events)

    @property
    def conditioning(self) -> tuple[Term, ...]:
        return _as_terms(self.given + self.events)

    def _key(self):
        sides = frozenset({frozenset(t.key for t in self.left), frozenset(t.key for t in self.right)})
        return (sides, frozenset(t.key for t in self.given), frozenset(t.key for t in self.events))

    def __eq__(self, other):
        return isinstance(other, CIStatement) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    def __str__(self):
        text = f"{','.join(map(str, self.left))} _||_ {','.join(map(str, self.right))}"
        if self.given:
            text += " | " + ",".join(map(str, self.given))
        if self.events:
            text += " [given " + ",".join(f"{t}=1" for t in self.events) + "]"
        return text

    def __repr__(self):
        return f"CIStatement({str(self)!r})"

    def sort_key(self):
        return (len(self.given) + len(self.events), str(self))


@dataclass(frozen=True)
class SeparationVerdict:
    separated: bool
    witness: tuple[str, ...] | None = None
    witness_text: str | None = None

    def __bool__(self):
        return self.separated


@dataclass(frozen=True)
class DagView:
    """Plain DAG used for traversal, with the user-facing term of each node.

    ``auxiliary`` holds latents introduced by bidirected-edge expansion;
    ``fixed`` maps intervention symbols to the node they fix (never traversed).
    """

    parents: dict
    children: dict
    terms: dict
    kinds: dict
    auxiliary: frozenset
    fixed: dict
    proxy_selection: dict

    def resolve(self, item) -> str:
        if isinstance(item, Term):
            name, labels = item.name, item.labels
        else:
            name, labels = _split_term_text(str(item))
        if name in self.terms:
            if labels and labels != self.terms[name].labels:
                raise GraphError(f"term {item} does not match node {self.terms[name]}")
            return name
        if name in self.fixed:
            raise GraphError(f"{name} refers to the fixed half of {self.fixed[name]}")
        if name in self.auxiliary:
            return name
        raise GraphError(f"unknown node {name!r}")


def _split_term_text(text: str) -> tuple[str, tuple[str, ...]]:
    m = re.fullmatch(r"\s*([A-Za-z][A-Za-z0-9_]*)\s*(?:\((.*)\))?\s*", text)
    if not m:
        raise GraphError(f"malformed term {text!r}")
    name, inner = m.group(1), m.group(2)
    if not inner:
        return name, ()
    labels: list[str] = []
    for part in _top_level_split(inner):
        sub_name, sub_labels = _split_term_text(part)
        if sub_labels:
            labels.extend(x for x in sub_labels if x not in labels)
        elif sub_name not in labels:
            labels.append(sub_name)
    return name, tuple(labels)


def _top_level_split(text: str) -> list[str]:
    parts, depth, cur = [], 0, ""
    for ch in text:
        if ch == "," and depth == 0:
            parts.append(cur)
            cur = ""
            continue
        depth += ch == "("
        depth -= ch == ")"
        cur += ch
    if cur.strip():
        parts.append(cur)
    return [p.strip() for p in parts]


@lru_cache(maxsize=512)
def _mgraph_view(g: MGraph) -> DagView:
    h = expand_latents(g)
    terms = {v: Term(v, selection=g.kind(v) is NodeKind.SELECTION) for v in g.nodes}
    proxy_sel = {p: g.proxy_source(p)[1] for p in g.nodes_of(NodeKind.PROXY)}
    return DagView(
        parents={v: h.parents(v) for v in h.nodes},
        children={v: h.children(v) for v in h.nodes},
        terms=terms,
        kinds={v: h.kind(v) for v in h.nodes},
        auxiliary=frozenset(set(h.nodes) - set(g.nodes)),
        fixed={},
        proxy_selection=proxy_sel,
    )


def dag_view(g) -> DagView:
    """Traversal view of an MGraph or SwigGraph; a view is returned unchanged (reuse it across queries)."""
    if isinstance(g, DagView):
        return g
    if isinstance(g, MGraph):
        return _mgraph_view(g)
    if hasattr(g, "dag_view"):
        return g.dag_view()
    raise TypeError(f"expected an MGraph or SwigGraph, got {type(g).__name__}")


# -- reachability -----------------------------------------------------------

def _ancestors_of(view: DagView, nodes) -> set:
    seen, stack = set(nodes), list(nodes)
    while stack:
        for p in view.parents[stack.pop()]:
            if p not in seen:
                seen.add(p)
                stack.append(p)
    return seen


def _reachable(view: DagView, sources, z: set) -> set:
    """Nodes with an active trail from ``sources`` given ``z`` (Bayes-ball)."""
    anc = _ancestors_of(view, z)
    visited = set()
    stack = [(s, True) for s in sources]  # True: arrived travelling up (from a child)
    found = set()
    while stack:
        v, up = stack.pop()
        if (v, up) in visited:
            continue
        visited.add((v, up))
        if v not in z:
            found.add(v)
        if up and v not in z:
            stack.extend((p, True) for p in view.parents[v])
            stack.extend((c, False) for c in view.children[v])
        elif not up:
            if v not in z:
                stack.extend((c, False) for c in view.children[v])
            if v in anc:
                stack.extend((p, True) for p in view.parents[v])
    return found


def _active_triple(view, a, v, b, z, anc) -> bool:
    collider = a in view.parents[v] and b in view.parents[v]
    return (v in anc) if collider else (v not in z)


def _witness(view: DagView, xs, ys, z: set):
    """Shortest active simple path from xs to ys, or None."""
    anc = _ancestors_of(view, z)
    ys = set(ys)
    # BFS over (node, previous node) keeps paths short; simple-path check on expansion.
    queue = deque((x,) for x in sorted(xs))
    best_seen = set()
    while queue:
        path = queue.popleft()
        v = path[-1]
        if len(path) > 1 and v in ys:
            return path
        prev = path[-2] if len(path) > 1 else None
        for w in sorted(set(view.parents[v]) | set(view.children[v])):
            if w in path:
                continue
            if prev is not None and not _active_triple(view, prev, v, w, z, anc):
                continue
            state = (v, w, prev in view.parents[v] if prev is not None else None)
            if state in best_seen:
                continue
            best_seen.add(state)
            queue.append(path + (w,))
    return _witness_dfs(view, xs, ys, z, anc)


def _witness_dfs(view, xs, ys, z, anc):
    def extend(path):
        v = path[-1]
        if len(path) > 1 and v in ys:
            return path
        prev = path[-2] if len(path) > 1 else None
        for w in sorted(set(view.parents[v]) | set(view.children[v])):
            if w in path:
                continue
            if prev is not None and not _active_triple(view, prev, v, w, z, anc):
                continue
            hit = extend(path + (w,))
            if hit:
                return hit
        return None

    for x in sorted(xs):
        hit = extend((x,))
        if hit:
            return hit
    return None


def format_path(view: DagView, path: Sequence[str]) -> str:
    """Render a path; an expansion latent between two of its children prints as ``<->``."""
    out = str(view.terms.get(path[0], path[0]))
    i = 0
    while i < len(path) - 1:
        a, b = path[i], path[i + 1]
        if b in view.auxiliary and i + 2 < len(path) and a in view.children[b] and path[i + 2] in view.children[b]:
            out += f" <-> {view.terms.get(path[i + 2], path[i + 2])}"
            i += 2
            continue
        arrow = "->" if a in view.parents[b] else "<-"
        out += f" {arrow} {view.terms.get(b, b)}"
        i += 1
    return out


def d_separated(g, x, y, z=(), *, witness: bool = True) -> SeparationVerdict:
    """Is ``x`` d-separated from ``y`` given ``z``?

    Examples
    --------
    >>> from mswig.graph import parse_graph
    >>> g = parse_graph("node X obs; node D obs; node Y obs; edge X -> D; edge D -> Y")
    >>> d_separated(g, "X", "Y", ["D"]).separated
    True
    """
    view = dag_view(g)
    xs, ys, zs = ({view.resolve(t) for t in _listify(s)} for s in (x, y, z))
    if not xs or not ys:
        raise GraphError("x and y must be nonempty")
    if xs & ys or xs & zs or ys & zs:
        raise GraphError("x, y and z must be disjoint")
    reach = _reachable(view, xs, zs)
    if not reach & ys:
        return SeparationVerdict(True)
    if not witness:
        return SeparationVerdict(False)
    path = _witness(view, xs, ys, zs)
    return SeparationVerdict(False, path, format_path(view, path))


def _listify(s):
    if isinstance(s, (str, Term)):
        return [s]
    return list(s)


# -- enumeration ------------------------------------------------------------

def _candidates(view: DagView, scope: str) -> list[str]:
    if scope not in ("all", "observed"):
        raise ValueError("scope must be 'all' or 'observed'")
    out = []
    for v, t in view.terms.items():
        kind = view.kinds[v]
        if scope == "observed" and kind in (NodeKind.LATENT, NodeKind.PARTIALLY_MISSING):
            continue
        out.append(v)
    return sorted(out, key=lambda v: view.terms[v].key)


def _make_statement(view: DagView, a: str, b: str, zset) -> CIStatement | None:
    """Attach selection events for proxy terms; drop statements the S=1 event cannot license."""
    events = set()
    for v in (a, b, *zset):
        if v in view.proxy_selection:
            events.add(view.proxy_selection[v])
    if events & {a, b}:
        return None
    if not events <= set(zset):
        return None
    given = [view.terms[v] for v in zset if v not in events]
    return CIStatement((view.terms[a],), (view.terms[b],), tuple(given), tuple(view.terms[v] for v in events))


def enumerate_independencies(g, scope: str = "all", max_conditioning: int | None = None) -> list[CIStatement]:
    """All singleton-sided statements implied by d-separation, sorted canonically.

    ``max_conditioning`` defaults to min(4, node count); an explicit value
    larger than the node count is an error.

    ``scope="observed"`` keeps only observed, selection and proxy nodes.  A
    statement involving a proxy is emitted only when the proxy's selection node
    is conditioned on; that node is then rendered as the event ``[given S=1]``.
    """
    view = dag_view(g)
    cands = _candidates(view, scope)
    if max_conditioning is None:
        max_conditioning = min(4, len(view.terms))
    if max_conditioning > len(view.terms):
        raise ValueError("max_conditioning exceeds the number of nodes")
    out = set()
    for i, a in enumerate(cands):
        rest = [v for v in cands if v != a]
        for size in range(min(max_conditioning, len(rest)) + 1):
            for zset in itertools.combinations(rest, size):
                zs = set(zset)
                reach = _reachable(view, [a], zs)
                for b in cands[i + 1:]:
                    if b in zs or b in reach:
                        continue
                    st = _make_statement(view, a, b, zset)
                    if st is not None:
                        out.add(st)
    return sorted(out, key=CIStatement.sort_key)


# -- semi-graphoid reasoning ---------------------------------------------------

def _subsets(mask: int):
    """Nonempty submasks of ``mask``."""
    sub = mask
    while sub:
        yield sub
        sub = (sub - 1) & mask


class Closure:
    """Closure of a statement set under the semi-graphoid axioms.

    Statements are triples of bitmasks ``(A, B, C)`` meaning ``A _||_ B | C``;
    symmetry, decomposition, weak union and contraction are applied to a
    fixpoint.  Suitable for the handful of variables in an m-graph.
    """

    def __init__(self, statements: Iterable[CIStatement] = ()):
        self._bits: dict = {}
        self._terms: list[Term] = []
        self.triples: set = set()
        self._by_ac: dict = {}
        for st in statements:
            self.add(st)

    def _mask(self, terms) -> int:
        m = 0
        for t in terms:
            if t.key not in self._bits:
                self._bits[t.key] = len(self._terms)
                self._terms.append(t)
            m |= 1 << self._bits[t.key]
        return m

    def triple(self, st: CIStatement):
        return (self._mask(st.left), self._mask(st.right), self._mask(st.conditioning))

    def add(self, st: CIStatement):
        self._add_triple(self.triple(st))

    def _add_triple(self, t):
        queue = [t]
        while queue:
            a, b, c = queue.pop()
            if (a, b, c) in self.triples:
                continue
            for tri in ((a, b, c), (b, a, c)):
                if tri in self.triples:
                    continue
                self.triples.add(tri)
                self._by_ac.setdefault((tri[0], tri[2]), set()).add(tri[1])
            for x, y in ((a, b), (b, a)):
                for sub in _subsets(y):
                    if sub != y:
                        queue.append((x, sub, c))
                        queue.append((x, sub, c | (y & ~sub)))
                # contraction, this triple first: (x,y,c) & (x,d,c|y) -> (x, y|d, c)
                for d in self._by_ac.get((x, c | y), ()):
                    queue.append((x, y | d, c))
                # this triple second: (x,b2,c-b2) & (x,y,c) -> (x, y|b2, c-b2)
                for b2 in _subsets(c):
                    if b2 in self._by_ac.get((x, c & ~b2), ()):
                        queue.append((x, y | b2, c & ~b2))

    def contains(self, st: CIStatement) -> bool:
        known = set(self._bits)
        for t in (*st.left, *st.right, *st.conditioning):
            if t.key not in known:
                return False
        return self.triple(st) in self.triples

    def maximal(self) -> list[CIStatement]:
        """Triples not obtainable from another closure member by decomposition/weak union."""
        tris = {tuple(sorted((a, b))) + (c,) for a, b, c in self.triples}
        keep = []
        for a, b, c in tris:
            dominated = False
            for a2, b2, c2 in tris:
                if (a2, b2, c2) == (a, b, c) or c2 & ~c:
                    continue
                for x2, y2 in ((a2, b2), (b2, a2)):
                    if a & ~x2 or b & ~y2:
                        continue
                    spare = (x2 & ~a) | (y2 & ~b)
                    if (c & ~c2) & ~spare:
                        continue
                    dominated = True
                    break
                if dominated:
                    break
            if not dominated:
                keep.append((a, b, c))
        return [self._to_statement(t) for t in keep]

    def _to_statement(self, tri) -> CIStatement:
        def terms(mask):
            return tuple(self._terms[i] for i in range(len(self._terms)) if mask >> i & 1)

        return CIStatement(terms(tri[0]), terms(tri[1]), terms(tri[2]))


def implies(statements: Iterable[CIStatement], target: CIStatement) -> bool:
    """Semi-graphoid implication check."""
    return Closure(statements).contains(target)


def reduce_statements(statements: Sequence[CIStatement], priority: Sequence[CIStatement] = ()) -> list[CIStatement]:
    """Greedy semi-graphoid pruning.

    A forward pass keeps each statement (``priority`` first, then the rest in
    the given order) unless the statements already kept imply it.  A backward
    pass then drops non-priority statements implied by the remaining ones.
    The result implies every input statement.
    """
    order = list(dict.fromkeys([*priority, *statements]))
    kept: list[CIStatement] = []
    closure = Closure()
    for st in order:
        if st in priority or not closure.contains(st):
            kept.append(st)
            closure.add(st)
    protected = set(priority)
    for st in reversed(list(kept)):
        if st in protected:
            continue
        others = [s for s in kept if s != st]
        if implies(others, st):
            kept = others
    return kept


def compact_statements(statements: Sequence[CIStatement]) -> list[CIStatement]:
    """Rewrite a statement set as its maximal joint statements, then prune."""
    closure = Closure(statements)
    events = {t.key: t for st in statements for t in st.events}
    out = []
    for st in closure.maximal():
        ev = tuple(t for t in st.given if t.key in events)
        given = tuple(t for t in st.given if t.key not in events)
        out.append(CIStatement(st.left, st.right, given, ev))
    return reduce_statements(sorted(out, key=CIStatement.sort_key))


def minimal_testable_set(g, max_conditioning: int | None = None) -> list[CIStatement]:
    """Observed-level implications with semi-graphoid-redundant statements removed."""
    view = dag_view(g)
    cap = min(4 if max_conditioning is None else max_conditioning, len(view.terms))
    return reduce_statements(enumerate_independencies(g, "observed", cap))


# -- text form --------------------------------------------------------------

_STATEMENT = re.compile(r"^(?P<left>.+?)\s+_\|\|_\s+(?P<right>.+?)(?:\s+\|\s+(?P<given>.+?))?(?:\s+\[given\s+(?P<events>[^\]]+)\])?\s*$")


def parse_statement(text: str, g=None) -> CIStatement:
    """Parse the ``A _||_ B | C [given S=1]`` text form.

    With a graph, terms are resolved against it so that labels, selection
    flags and nested proxy display match engine output.
    """
    m = _STATEMENT.match(text.strip())
    if not m:
        raise GraphError(f"malformed statement {text!r}")
    view = dag_view(g) if g is not None else None

    def terms(part):
        if not part:
            return ()
        out = []
        for item in _top_level_split(part):
            name, labels = _split_term_text(item)
            if view is not None:
                out.append(view.terms[view.resolve(Term(name, labels))])
            else:
                out.append(Term(name, labels))
        return tuple(out)

    events = ()
    if m.group("events"):
        items = [e.strip() for e in _top_level_split(m.group("events"))]
        if any(not e.endswith("=1") for e in items):
            raise GraphError(f"selection events must read S=1: {text!r}")
        events = terms(",".join(e[:-2] for e in items))
    return CIStatement(terms(m.group("left")), terms(m.group("right")), terms(m.group("given")), events)
