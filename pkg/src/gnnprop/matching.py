"""Target-rooted structures, isomorphism tests and subgraph match enumeration."""
from __future__ import annotations

from dataclasses import dataclass
from functools import cached_property
from typing import Iterator

import numpy as np

DEFAULT_CAP = 100_000


@dataclass(frozen=True)
class Structure:
    node_count: int
    edges: tuple[tuple[int, int, int], ...]
    target: int

    def __post_init__(self) -> None:
        edges = tuple(sorted((int(s), int(d), int(t)) for s, d, t in self.edges))
        if len(set(edges)) != len(edges):
            raise ValueError("duplicate structure edge")
        n = int(self.node_count)
        if n < 1 or not 0 <= self.target < n:
            raise ValueError("bad node count or target")
        for s, d, t in edges:
            if not (0 <= s < n and 0 <= d < n) or t < 0:
                raise ValueError(f"structure edge {(s, d, t)} out of range")
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "node_count", n)
        object.__setattr__(self, "target", int(self.target))

    def to_json(self) -> dict:
        return {"n": self.node_count, "edges": [list(e) for e in self.edges], "target": self.target}

    @staticmethod
    def from_json(obj: dict) -> "Structure":
        return Structure(int(obj["n"]), tuple(tuple(e) for e in obj["edges"]), int(obj["target"]))

    def is_connected_to_target(self) -> bool:
        seen = {self.target}
        changed = True
        while changed:
            changed = False
            for s, d, _ in self.edges:
                if (s in seen) != (d in seen):
                    seen.update((s, d))
                    changed = True
        return len(seen) == self.node_count

    @cached_property
    def key(self) -> tuple:
        return (self.node_count, self.edges, self.target)


@dataclass(frozen=True)
class MatchResult:
    matches: list[tuple[int, ...]]
    truncated: bool

    def __len__(self) -> int:
        return len(self.matches)

    def __iter__(self) -> Iterator[tuple[int, ...]]:
        return iter(self.matches)


class _View:
    """Adjacency view shared by Graph and Structure."""

    def __init__(self, n: int, edges) -> None:
        self.n = n
        self.edge_set = {(int(s), int(d), int(t)) for s, d, t in edges}
        self.out: list[set[tuple[int, int]]] = [set() for _ in range(n)]
        self.inn: list[set[tuple[int, int]]] = [set() for _ in range(n)]
        for s, d, t in self.edge_set:
            self.out[s].add((d, t))
            self.inn[d].add((s, t))
        self.deg_sig = [self._sig(v) for v in range(n)]

    def _sig(self, v: int) -> dict:
        sig: dict[tuple[str, int], int] = {}
        for _, t in self.out[v]:
            sig[("o", t)] = sig.get(("o", t), 0) + 1
        for _, t in self.inn[v]:
            sig[("i", t)] = sig.get(("i", t), 0) + 1
        return sig


_VIEW_CACHE_ATTR = "_match_view"


def _view(g) -> _View:
    if isinstance(g, Structure):
        return _View(g.node_count, g.edges)
    v = g.__dict__.get(_VIEW_CACHE_ATTR)
    if v is None:
        v = _View(g.node_count, g.edges.tolist())
        g.__dict__[_VIEW_CACHE_ATTR] = v
    return v


def _dominates(big: dict, small: dict) -> bool:
    return all(big.get(k, 0) >= c for k, c in small.items())


def _search(gv: _View, sv: _View, cap: int, exact: bool, fixed: dict[int, int] | None = None):
    k = sv.n
    order = list(range(k))
    # constraints of each structure node towards earlier nodes in the order
    back = []
    for pos, u in enumerate(order):
        earlier = set(order[:pos])
        cons = [(s, d, t) for s, d, t in sv.edge_set if (s == u and (d in earlier or d == u)) or (d == u and s in earlier)]
        back.append(cons)
    mapping = [-1] * k
    used: set[int] = set()
    found: list[tuple[int, ...]] = []
    truncated = False
    all_nodes = range(gv.n)

    def candidates(pos: int):
        u = order[pos]
        if fixed and u in fixed:
            return [fixed[u]]
        for s, d, t in back[pos]:
            if s == u and d != u:
                return sorted(a for a, tt in gv.inn[mapping[d]] if tt == t)
            if d == u and s != u:
                return sorted(b for b, tt in gv.out[mapping[s]] if tt == t)
        return all_nodes

    def rec(pos: int) -> bool:
        nonlocal truncated
        if pos == k:
            if len(found) >= cap:
                truncated = True
                return False
            found.append(tuple(mapping))
            return True
        u = order[pos]
        for c in candidates(pos):
            if c in used:
                continue
            if exact:
                if gv.deg_sig[c] != sv.deg_sig[u]:
                    continue
            elif not _dominates(gv.deg_sig[c], sv.deg_sig[u]):
                continue
            mapping[u] = c
            ok = True
            for s, d, t in back[pos]:
                if (mapping[s], mapping[d], t) not in gv.edge_set:
                    ok = False
                    break
            if ok:
                used.add(c)
                cont = rec(pos + 1)
                used.discard(c)
                if not cont:
                    mapping[u] = -1
                    return False
            mapping[u] = -1
        return True

    rec(0)
    return found, truncated


def enumerate_subiso_matches(g, s: Structure, cap: int = DEFAULT_CAP) -> MatchResult:
    """All injective edge-preserving maps of `s` into `g`, lexicographically ordered."""
    if cap < 1:
        raise ValueError("cap must be >= 1")
    found, truncated = _search(_view(g), _view(s), cap, exact=False)
    return MatchResult(found, truncated)


def matches_at(g, s: Structure, host: int, cap: int = DEFAULT_CAP) -> MatchResult:
    """Matches whose target lands on `host`."""
    found, truncated = _search(_view(g), _view(s), cap, exact=False, fixed={s.target: host})
    return MatchResult(found, truncated)


def is_isomorphic(g, s: Structure) -> tuple[int, ...] | None:
    """A bijection preserving edges, non-edges and edge types, or None."""
    gv, sv = _view(g), _view(s)
    if gv.n != sv.n or len(gv.edge_set) != len(sv.edge_set):
        return None
    found, _ = _search(gv, sv, 1, exact=True)
    return found[0] if found else None


def check_match(g, s: Structure, m: tuple[int, ...]) -> bool:
    gv = _view(g)
    if len(set(m)) != len(m) or len(m) != s.node_count:
        return False
    return all((m[a], m[b], t) in gv.edge_set for a, b, t in s.edges)


def structure_as_graph(s: Structure, x: np.ndarray, e: np.ndarray):
    from .graph import Graph

    return Graph(x, np.array(s.edges, dtype=np.int64).reshape(-1, 3), e)

