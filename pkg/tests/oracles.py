"""Independent reference implementations used only by the tests.

Nothing here imports the package's traversal or estimation code.
"""

from __future__ import annotations

import itertools

import numpy as np


# -- d-separation -----------------------------------------------------------------

def random_dag(rng: np.random.Generator, n_nodes: int, p: float) -> dict[str, set[str]]:
    """Parents map of a random DAG over V0..V{n-1}; edges only go from lower to higher index."""
    names = [f"V{i}" for i in range(n_nodes)]
    parents = {v: set() for v in names}
    for i, j in itertools.combinations(range(n_nodes), 2):
        if rng.random() < p:
            parents[names[j]].add(names[i])
    return parents


def ancestral_closure(parents, nodes) -> set:
    out, stack = set(nodes), list(nodes)
    while stack:
        for p in parents[stack.pop()]:
            if p not in out:
                out.add(p)
                stack.append(p)
    return out


def moral_dsep(parents, x, y, z) -> bool:
    """Lauritzen criterion: separation in the moralized ancestral graph with z removed."""
    x, y, z = set(x), set(y), set(z)
    keep = ancestral_closure(parents, x | y | z)
    adj = {v: set() for v in keep}
    for v in keep:
        ps = [p for p in parents[v] if p in keep]
        for p in ps:
            adj[v].add(p)
            adj[p].add(v)
        for a, b in itertools.combinations(ps, 2):
            adj[a].add(b)
            adj[b].add(a)
    seen, stack = set(x), list(x)
    while stack:
        v = stack.pop()
        if v in y:
            return False
        for w in adj[v] - z:
            if w not in seen:
                seen.add(w)
                stack.append(w)
    return True


def path_dsep(parents, x, y, z) -> bool:
    """Enumerate every simple path in the skeleton and check it for activity."""
    children = {v: set() for v in parents}
    for v, ps in parents.items():
        for p in ps:
            children[p].add(v)
    z = set(z)
    anc_z = ancestral_closure(parents, z)

    def active(path):
        for a, v, b in zip(path, path[1:], path[2:]):
            collider = a in parents[v] and b in parents[v]
            if collider and v not in anc_z:
                return False
            if not collider and v in z:
                return False
        return True

    def walk(path):
        v = path[-1]
        if v in y:
            return active(path)
        for w in parents[v] | children[v]:
            if w not in path and w not in x and walk(path + [w]):
                return True
        return False

    return not any(walk([s]) for s in x)


# -- trimming bounds on a discrete population ------------------------------------------

def vertex_trimmed_means(values, probs, share):
    """Min and max of sum(w y) / share over {0 <= w <= p, sum w = share}, by visiting every vertex.

    A vertex saturates a subset of atoms and gives at most one atom a fractional weight.
    """
    values, probs = np.asarray(values, float), np.asarray(probs, float)
    k = len(values)
    best_lo, best_hi = np.inf, -np.inf
    for full in itertools.product((0, 1), repeat=k):
        full = np.array(full, bool)
        taken = probs[full].sum()
        rest = share - taken
        if rest < -1e-12:
            continue
        candidates = [None] if abs(rest) <= 1e-12 else [j for j in range(k) if not full[j] and probs[j] >= rest - 1e-12]
        for j in candidates:
            total = (values[full] * probs[full]).sum() + (0.0 if j is None else values[j] * rest)
            best_lo = min(best_lo, total / share)
            best_hi = max(best_hi, total / share)
    return best_lo, best_hi


def discrete_bounds(cells):
    """Sharp always-observed effect bounds for a discrete population.

    ``cells`` maps x -> dict(px, s0, s1, y1 = (values, probs), y0 = (values, probs))
    where y_d is the outcome law given S=1, D=d, X=x.  Positive cells
    (s0 <= s1) trim the treated law to share s0/s1; negative cells trim the
    control law to share s1/s0.
    """
    num_lo = num_hi = den = 0.0
    for c in cells.values():
        v1, p1 = c["y1"]
        v0, p0 = c["y0"]
        mean1 = float(np.dot(v1, p1))
        mean0 = float(np.dot(v0, p0))
        if c["s0"] <= c["s1"]:
            lo1, hi1 = vertex_trimmed_means(v1, p1, c["s0"] / c["s1"])
            lo, hi, ao = lo1 - mean0, hi1 - mean0, c["s0"]
        else:
            lo0, hi0 = vertex_trimmed_means(v0, p0, c["s1"] / c["s0"])
            lo, hi, ao = mean1 - hi0, mean1 - lo0, c["s1"]
        w = c["px"] * ao
        num_lo += w * lo
        num_hi += w * hi
        den += w
    return num_lo / den, num_hi / den


def expand_cells(spec):
    """Rows realizing a discrete population exactly.

    ``spec`` maps x -> {d: (n_rows, [outcomes of selected rows])}; unselected
    rows fill the remainder of each (x, d) block.
    """
    rows = []
    for x, arms in spec.items():
        for d, (n_rows, ys) in arms.items():
            for y in ys:
                rows.append((x, d, 1, float(y)))
            rows += [(x, d, 0, np.nan)] * (n_rows - len(ys))
    return rows


def cells_from_spec(spec):
    total = sum(n for arms in spec.values() for n, _ in arms.values())
    cells = {}
    for x, arms in spec.items():
        n0, y0 = arms[0]
        n1, y1 = arms[1]
        cells[x] = {
            "px": (n0 + n1) / total,
            "s0": len(y0) / n0,
            "s1": len(y1) / n1,
            "y0": _law(y0),
            "y1": _law(y1),
        }
    return cells


def _law(ys):
    vals, counts = np.unique(np.asarray(ys, float), return_counts=True)
    return vals, counts / counts.sum()


# -- plug-in effects on discrete data --------------------------------------------------

def groupby_adjusted_mean(frame, d, x_cols, outcome, selection=None, weights_from=None):
    """sum_x E[Y | S=1, D=d, X=x] P(X=x) computed with pandas group-bys."""
    target = frame if weights_from is None else weights_from
    rows = frame[frame["D"] == d]
    if selection is not None:
        rows = rows[rows[selection] == 1]
    w = target.groupby(x_cols).size() / len(target)
    m = rows.groupby(x_cols)[outcome].mean()
    return float((w * m.reindex(w.index)).sum())
