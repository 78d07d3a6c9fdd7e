"""Random model/graph builders and independent reference oracles used by the tests."""
from __future__ import annotations

import itertools
from fractions import Fraction

import numpy as np

from gnnprop.gnn import EMPTY_MAX, Gnn, GnnLayer, Objective
from gnnprop.graph import Graph
from gnnprop.matching import Structure
from gnnprop.nn import Affine, Fnn, MaxPool, Relu


ACCEPTANCE_LINES: list[str] = []


def report(n: int, ok: bool, detail: str) -> None:
    """Record and print one acceptance line."""
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


# random builders ------------------------------------------------------------------

def random_fnn(rng: np.random.Generator, n_in: int, n_out: int, depth: int | None = None,
               width: int = 6, pools: bool = True) -> Fnn:
    depth = int(rng.integers(0, 3)) if depth is None else depth
    layers = []
    cur = n_in
    for _ in range(depth):
        h = int(rng.integers(1, width + 1))
        layers.append(Affine(np.round(rng.normal(size=(h, cur)), 3), np.round(rng.normal(size=h), 3)))
        if pools and h >= 2 and rng.random() < 0.4:
            idx = rng.permutation(h).tolist()
            cut = int(rng.integers(2, h + 1))
            parts = [tuple(idx[:cut])]
            rest = idx[cut:]
            if len(rest) >= 2 and rng.random() < 0.5:
                parts.append(tuple(rest[:2]))
            layer = MaxPool(h, tuple(parts))
        else:
            layer = Relu(h)
        layers.append(layer)
        cur = layer.n_out
    layers.append(Affine(np.round(rng.normal(size=(n_out, cur)), 3), np.round(rng.normal(size=n_out), 3)))
    return Fnn(tuple(layers))


def random_gnn(rng: np.random.Generator, max_layers: int = 3, max_dim: int = 8, max_etypes: int = 2) -> Gnn:
    n_layers = int(rng.integers(1, max_layers + 1))
    node_dim = int(rng.integers(1, max_dim + 1))
    edge_dim = int(rng.integers(0, 3))
    etypes = int(rng.integers(1, max_etypes + 1))
    layers = []
    d = node_dim
    for _ in range(n_layers):
        mdim = int(rng.integers(1, max_dim + 1))
        out = int(rng.integers(1, max_dim + 1))
        msg = tuple(random_fnn(rng, 2 * d + edge_dim, mdim) for _ in range(etypes))
        upd = random_fnn(rng, d + mdim * etypes, out)
        layers.append(GnnLayer(msg, str(rng.choice(["sum", "mean", "max"])), upd, bool(rng.random() < 0.5)))
        d = out
    return Gnn(tuple(layers), node_dim, edge_dim, {"y": Objective(0, d, "regression")})


def random_structure(rng: np.random.Generator, max_nodes: int = 6, etypes: int = 1, p: float = 0.35) -> Structure:
    n = int(rng.integers(1, max_nodes + 1))
    edges = set()
    for v in range(1, n):  # connected through a random tree
        u = int(rng.integers(0, v))
        a, b = (u, v) if rng.random() < 0.5 else (v, u)
        edges.add((a, b, int(rng.integers(0, etypes))))
    for a in range(n):
        for b in range(n):
            if a != b and rng.random() < p / n:
                edges.add((a, b, int(rng.integers(0, etypes))))
    return Structure(n, tuple(sorted(edges)), int(rng.integers(0, n)))


def random_graph(rng: np.random.Generator, n: int, node_dim: int = 1, edge_dim: int = 0, etypes: int = 1,
                 p: float = 0.3) -> Graph:
    edges = [(a, b, t) for a in range(n) for b in range(n) for t in range(etypes) if a != b and rng.random() < p]
    x = rng.normal(size=(n, node_dim))
    e = rng.normal(size=(len(edges), edge_dim))
    return Graph(x, np.array(edges, dtype=np.int64).reshape(-1, 3), e)


# naive evaluators ---------------------------------------------------------------

def naive_fnn(f: Fnn, x) -> list[float]:
    h = [float(v) for v in x]
    for layer in f.layers:
        if isinstance(layer, Affine):
            h = [sum(float(layer.A[r, c]) * h[c] for c in range(len(h))) + float(layer.b[r])
                 for r in range(layer.A.shape[0])]
        elif isinstance(layer, Relu):
            h = [v if v > 0 else 0.0 for v in h]
        else:
            pooled = [max(h[i] for i in p) for p in layer.partitions]
            h = pooled + [h[i] for i in layer.passthrough]
    return h


def naive_forward(m: Gnn, g: Graph) -> np.ndarray:
    """Per-node loop implementation of message passing."""
    h = [list(map(float, row)) for row in np.asarray(g.x)]
    for layer in m.layers:
        new = []
        for i in range(g.node_count):
            aggs = []
            for t in range(layer.etypes):
                msgs = []
                for k, (s, d, et) in enumerate(g.edges.tolist()):
                    if d == i and et == t:
                        msgs.append(naive_fnn(layer.msg[t], h[s] + h[i] + list(map(float, g.e[k]))))
                if layer.self_loop and t == 0:
                    msgs.append(naive_fnn(layer.msg[t], h[i] + h[i] + [0.0] * g.e.shape[1]))
                w = layer.msg_dim
                if not msgs:
                    aggs += [EMPTY_MAX if layer.agg == "max" else 0.0] * w
                elif layer.agg == "sum":
                    aggs += [sum(mm[q] for mm in msgs) for q in range(w)]
                elif layer.agg == "mean":
                    aggs += [sum(mm[q] for mm in msgs) / len(msgs) for q in range(w)]
                else:
                    aggs += [max(mm[q] for mm in msgs) for q in range(w)]
            new.append(naive_fnn(layer.upd, h[i] + aggs))
        h = new
    return np.array(h, dtype=float).reshape(g.node_count, -1)


# matching oracle ------------------------------------------------------------------

def brute_subiso(g: Graph, s: Structure) -> list[tuple[int, ...]]:
    have = set(map(tuple, g.edges.tolist()))
    out = []
    for perm in itertools.permutations(range(g.node_count), s.node_count):
        if all((perm[a], perm[b], t) in have for a, b, t in s.edges):
            out.append(perm)
    return out


def brute_iso(g: Graph, s: Structure) -> bool:
    if g.node_count != s.node_count or g.edge_count != len(s.edges):
        return False
    have = set(map(tuple, g.edges.tolist()))
    return any(all((p[a], p[b], t) in have for a, b, t in s.edges) for p in itertools.permutations(range(g.node_count)))


def contains_pattern(big: Structure, pat: Structure) -> bool:
    """Directed labelled subgraph containment with target mapped to target."""
    have = set(big.edges)
    for perm in itertools.permutations(range(big.node_count), pat.node_count):
        if perm[pat.target] != big.target:
            continue
        if all((perm[a], perm[b], t) in have for a, b, t in pat.edges):
            return True
    return False


def same_pattern(a: Structure, b: Structure) -> bool:
    if a.node_count != b.node_count or len(a.edges) != len(b.edges):
        return False
    return contains_pattern(a, b)


# LP oracle: Fourier-Motzkin over rationals ----------------------------------------

def fm_feasible(C, d, strict) -> bool:
    """Exact feasibility of {C x <= d (strict where flagged)} by variable elimination."""
    rows = [([Fraction(v) for v in c], Fraction(r), bool(s)) for c, r, s in zip(np.asarray(C).tolist(), d, strict)]
    n = len(rows[0][0]) if rows else 0
    for j in range(n):
        pos, neg, zero = [], [], []
        for c, r, s in rows:
            (pos if c[j] > 0 else neg if c[j] < 0 else zero).append((c, r, s))
        new = list(zero)
        for cp, rp, sp in pos:
            for cn, rn, sn in neg:
                a, b = cp[j], -cn[j]
                c = [b * u + a * v for u, v in zip(cp, cn)]
                new.append((c, b * rp + a * rn, sp or sn))
        rows = new
    for c, r, s in rows:
        if s and not r > 0:
            return False
        if not s and not r >= 0:
            return False
    return True


# CART oracle ----------------------------------------------------------------------

def naive_cart(F: np.ndarray, y: np.ndarray, depth: int, min_leaf: int):
    """Straightforward recursive CART; returns a nested tuple tree."""
    F = [list(map(float, r)) for r in F]
    y = [bool(v) for v in y]

    def gini_n(labels):
        n = len(labels)
        if not n:
            return 0.0
        h = sum(labels)
        return n - (h * h + (n - h) * (n - h)) / n

    def build(idx, dleft):
        labs = [y[i] for i in idx]
        leaf = ("leaf", sum(labs) > len(labs) - sum(labs))
        if dleft == 0 or all(labs) or not any(labs) or len(idx) < 2 * min_leaf:
            return leaf
        parent = gini_n(labs)
        best = None
        for f in range(len(F[0])):
            vals = sorted({F[i][f] for i in idx})
            for a, b in zip(vals, vals[1:]):
                thr = (a + b) / 2
                left = [i for i in idx if F[i][f] <= thr]
                right = [i for i in idx if F[i][f] > thr]
                if len(left) < min_leaf or len(right) < min_leaf:
                    continue
                imp = gini_n([y[i] for i in left]) + gini_n([y[i] for i in right])
                if imp < parent - 1e-12 and (best is None or imp < best[0]):
                    best = (imp, f, thr, left, right)
        if best is None:
            return leaf
        _, f, thr, left, right = best
        return ("split", f, thr, build(left, dleft - 1), build(right, dleft - 1))

    return build(list(range(len(y))), depth)


def naive_cart_predict(tree, row) -> bool:
    while tree[0] == "split":
        _, f, thr, l, r = tree
        tree = l if row[f] <= thr else r
    return tree[1]
