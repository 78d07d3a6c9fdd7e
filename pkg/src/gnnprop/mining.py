"""Influential-substructure extraction and frequent-structure mining (gSpan)."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gnn import Gnn, gnn_forward
from .graph import Graph, ego_graph
from .matching import Structure

DEFAULT_THRESHOLD = 0.8
DEFAULT_MIN_SUPPORT = 0.1
DEFAULT_TOP_K = 5
DEFAULT_MAX_NODES = 5


def _objective_columns(m: Gnn, objectives: Optional[Sequence[str]]) -> list[int]:
    names = sorted(m.objectives) if objectives is None else list(objectives)
    if not names:
        return list(range(m.out_dim))
    cols: list[int] = []
    for n in names:
        o = m.objectives[n]
        cols.extend(range(o.lo, o.hi))
    return cols


def influence_structure(m: Gnn, g: Graph, target: int, threshold: float = DEFAULT_THRESHOLD,
                        objectives: Optional[Sequence[str]] = None) -> Structure:
    """Edges whose removal moves the target's output most, as a target-rooted structure."""
    if not 0 < threshold <= 1:
        raise ValueError("threshold must be in (0, 1]")
    if not 0 <= target < g.node_count:
        raise IndexError(f"target {target} out of range")
    ego = ego_graph(g, target, len(m.layers))
    sub, c = ego.graph, ego.center
    if sub.edge_count == 0:
        return Structure(1, (), 0)
    cols = _objective_columns(m, objectives)
    base = gnn_forward(m, sub)[c, cols]
    scores = np.zeros(sub.edge_count)
    for k in range(sub.edge_count):
        y = gnn_forward(m, sub.with_edges_removed([k]))[c, cols]
        scores[k] = float(np.abs(base - y).sum())
    top = scores.max()
    if top <= 0:
        return Structure(1, (), 0)
    kept = [tuple(int(v) for v in sub.edges[k]) for k in range(sub.edge_count) if scores[k] / top >= threshold]
    # weakly connected component of the target
    comp = {c}
    changed = True
    while changed:
        changed = False
        for s, d, _ in kept:
            if (s in comp) != (d in comp):
                comp.update((s, d))
                changed = True
    others = sorted(v for v in comp if v != c)
    local = {v: k for k, v in enumerate(others)}
    local[c] = len(others)
    edges = tuple((local[s], local[d], t) for s, d, t in kept if s in comp and d in comp)
    return Structure(len(comp), edges, len(others))


# gSpan --------------------------------------------------------------------------
#
# Structures are treated as undirected labelled multigraphs for DFS coding:
# vertex label = target flag, edge label = (etype, direction), where the
# direction bit is 0 when the original edge points from the code entry's
# `frm` vertex to its `to` vertex.

@dataclass(frozen=True)
class _G:
    vlab: tuple[int, ...]
    # adjacency: vertex -> list of (edge id, other vertex, etype, forward?)
    adj: tuple[tuple[tuple[int, int, int, bool], ...], ...]


def _as_labelled(s: Structure) -> _G:
    adj: list[list[tuple[int, int, int, bool]]] = [[] for _ in range(s.node_count)]
    for eid, (a, b, t) in enumerate(s.edges):
        if a == b:
            continue
        adj[a].append((eid, b, t, True))
        adj[b].append((eid, a, t, False))
    vlab = tuple(1 if v == s.target else 0 for v in range(s.node_count))
    return _G(vlab, tuple(tuple(x) for x in adj))


def _elab(t: int, fwd: bool) -> tuple[int, int]:
    return (t, 0 if fwd else 1)


# code entry: (frm, to, lab_frm, elab, lab_to)
Entry = tuple[int, int, int, tuple[int, int], int]


def _entry_key(e: Entry, is_forward: bool, rm: int) -> tuple:
    """Sort key among candidate extensions of one code (gSpan order)."""
    frm, to, lf, el, lt = e
    if not is_forward:
        return (0, to, el)            # backward first, smaller target first
    return (1, -frm, el, lt)          # forward: deeper source first


@dataclass
class _Emb:
    gid: int
    vmap: tuple[int, ...]             # code vertex -> graph vertex
    used: frozenset[int]              # used edge ids


def _rightmost_path(code: list[Entry]) -> list[int]:
    """Code vertices on the rightmost path, from the rightmost vertex up to the root."""
    if not code:
        return [0]
    parent: dict[int, int] = {}
    for frm, to, *_ in code:
        if to > frm:
            parent[to] = frm
    rm = max(max(e[0], e[1]) for e in code)
    path = [rm]
    while path[-1] in parent:
        path.append(parent[path[-1]])
    return path


def _extensions(graphs: list[_G], code: list[Entry], embs: list[_Emb], max_nodes: int):
    """All rightmost extensions with their embeddings, grouped by entry."""
    path = _rightmost_path(code)
    rm = path[0]
    n_vert = rm + 1
    out: dict[Entry, list[_Emb]] = defaultdict(list)
    for emb in embs:
        g = graphs[emb.gid]
        inv = {gv: cv for cv, gv in enumerate(emb.vmap)}
        grm = emb.vmap[rm]
        # backward: rightmost vertex to a vertex on the rightmost path
        for eid, other, t, fwd in g.adj[grm]:
            if eid in emb.used or other not in inv:
                continue
            cv = inv[other]
            if cv in path[1:]:
                e = (rm, cv, g.vlab[grm], _elab(t, fwd), g.vlab[other])
                out[e].append(_Emb(emb.gid, emb.vmap, emb.used | {eid}))
        if n_vert >= max_nodes:
            continue
        # forward: from rightmost path vertices to new vertices
        for cv in path:
            gv = emb.vmap[cv]
            for eid, other, t, fwd in g.adj[gv]:
                if eid in emb.used or other in inv:
                    continue
                e = (cv, n_vert, g.vlab[gv], _elab(t, fwd), g.vlab[other])
                out[e].append(_Emb(emb.gid, emb.vmap + (other,), emb.used | {eid}))
    return out


def _is_forward(e: Entry) -> bool:
    return e[1] > e[0]


def _initial(graphs: list[_G]) -> dict[Entry, list[_Emb]]:
    out: dict[Entry, list[_Emb]] = defaultdict(list)
    for gid, g in enumerate(graphs):
        for a in range(len(g.vlab)):
            for eid, b, t, fwd in g.adj[a]:
                e = (0, 1, g.vlab[a], _elab(t, fwd), g.vlab[b])
                out[e].append(_Emb(gid, (a, b), frozenset((eid,))))
    return out


def _code_graph(code: list[Entry]) -> _G:
    n = max(max(e[0], e[1]) for e in code) + 1
    vlab = [0] * n
    adj: list[list[tuple[int, int, int, bool]]] = [[] for _ in range(n)]
    for eid, (frm, to, lf, (t, dirbit), lt) in enumerate(code):
        vlab[frm], vlab[to] = lf, lt
        fwd = dirbit == 0
        adj[frm].append((eid, to, t, fwd))
        adj[to].append((eid, frm, t, not fwd))
    return _G(tuple(vlab), tuple(tuple(x) for x in adj))


def min_dfs_code(g: _G) -> list[Entry]:
    """Minimum DFS code of a connected labelled graph (greedy over all embeddings)."""
    graphs = [g]
    init = _initial(graphs)
    if not init:
        return []
    first = min(init)
    code = [first]
    embs = init[first]
    n_edges = sum(len(a) for a in g.adj) // 2
    while len(code) < n_edges:
        ext = _extensions(graphs, code, embs, max_nodes=len(g.vlab))
        if not ext:
            break
        rm = _rightmost_path(code)[0]
        best = min(ext, key=lambda e: _entry_key(e, _is_forward(e), rm))
        code.append(best)
        embs = ext[best]
    return code


def _is_min(code: list[Entry]) -> bool:
    g = _code_graph(code)
    graphs = [g]
    init = _initial(graphs)
    first = min(init)
    if first != code[0]:
        return False
    embs = init[first]
    for k in range(1, len(code)):
        ext = _extensions(graphs, code[:k], embs, max_nodes=len(g.vlab))
        rm = _rightmost_path(code[:k])[0]
        best = min(ext, key=lambda e: _entry_key(e, _is_forward(e), rm))
        if _entry_key(best, _is_forward(best), rm) < _entry_key(code[k], _is_forward(code[k]), rm):
            return False
        if best != code[k]:
            # same key but different entry cannot happen; different key handled above
            return False
        embs = ext[best]
    return True


def code_to_structure(code: list[Entry], single_label: int = 1) -> Structure:
    if not code:
        return Structure(1, (), 0)
    g = _code_graph(code)
    n = len(g.vlab)
    tgt = [v for v in range(n) if g.vlab[v] == 1]
    if len(tgt) != 1:
        raise ValueError("pattern must contain exactly one target vertex")
    t = tgt[0]
    others = [v for v in range(n) if v != t]
    local = {v: k for k, v in enumerate(others)}
    local[t] = n - 1
    edges = []
    for frm, to, _, (et, dirbit), _ in code:
        a, b = (frm, to) if dirbit == 0 else (to, frm)
        edges.append((local[a], local[b], et))
    return Structure(n, tuple(edges), n - 1)


@dataclass(frozen=True)
class Mined:
    structure: Structure
    support: int
    code: tuple


def mine_frequent(structures: Sequence[Structure], min_support: float = DEFAULT_MIN_SUPPORT,
                  max_nodes: int = DEFAULT_MAX_NODES, top_k: int = DEFAULT_TOP_K) -> list[Mined]:
    """Frequent target-containing patterns over a multiset of structures."""
    if not structures:
        raise ValueError("no structures to mine")
    if not 0 < min_support <= 1:
        raise ValueError("min_support must be in (0, 1]")
    graphs = [_as_labelled(s) for s in structures]
    need = int(np.ceil(min_support * len(structures) - 1e-12))
    found: list[Mined] = []
    # single target vertex
    n_tgt = sum(1 for g in graphs if 1 in g.vlab)
    if n_tgt >= need:
        found.append(Mined(Structure(1, (), 0), n_tgt, ()))

    def grow(code: list[Entry], embs: list[_Emb]) -> None:
        sup = len({e.gid for e in embs})
        if sup < need or not _is_min(code):
            return
        g = _code_graph(code)
        if sum(g.vlab) == 1:
            found.append(Mined(code_to_structure(code), sup, tuple(code)))
        if sum(g.vlab) > 1:
            return  # a pattern can hold at most one target
        ext = _extensions(graphs, code, embs, max_nodes)
        for e in sorted(ext, key=lambda z: (_entry_key(z, _is_forward(z), 0), z)):
            grow(code + [e], ext[e])

    init = _initial(graphs)
    for e in sorted(init):
        grow([e], init[e])
    found.sort(key=lambda m: (-m.support, m.structure.node_count, m.code))
    return found[:top_k]
