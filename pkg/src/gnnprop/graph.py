"""Attributed directed multigraphs, datasets and their canonical JSON form."""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from . import jsonio

KINDS = ("classification", "regression")


class DatasetError(ValueError):
    """Malformed or inconsistent dataset content."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Graph:
    """Directed multigraph with typed edges.

    Edges are kept sorted by (src, dst, etype); the constructor sorts them
    and permutes edge features to match.
    """

    x: np.ndarray
    edges: np.ndarray
    e: np.ndarray
    labels: Mapping[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self) -> None:
        x = np.array(self.x, dtype=float, ndmin=2)
        if x.ndim != 2:
            raise DatasetError("node features must be a matrix")
        n = x.shape[0]
        edges = np.array(self.edges, dtype=np.int64).reshape(-1, 3)
        e = np.array(self.e, dtype=float)
        if e.size == 0:
            e = e.reshape(len(edges), e.shape[1] if e.ndim == 2 else 0)
        if e.ndim != 2 or e.shape[0] != len(edges):
            raise DatasetError("edge features must have one row per edge")
        if len(edges):
            if edges[:, :2].min() < 0 or edges[:, :2].max() >= n:
                raise DatasetError("edge endpoint out of range")
            if edges[:, 2].min() < 0:
                raise DatasetError("negative edge type")
            order = np.lexsort((edges[:, 2], edges[:, 1], edges[:, 0]))
            edges, e = edges[order], e[order]
            same = np.all(edges[1:] == edges[:-1], axis=1)
            if same.any():
                raise DatasetError(f"duplicate edge {edges[1:][same][0].tolist()}")
        labels = {}
        for name, vec in dict(self.labels).items():
            v = np.asarray(vec)
            if v.shape != (n,):
                raise DatasetError(f"label '{name}' has length {v.shape}, expected {n}")
            labels[name] = _frozen(v.copy())
        object.__setattr__(self, "x", _frozen(x))
        object.__setattr__(self, "edges", _frozen(edges))
        object.__setattr__(self, "e", _frozen(e))
        object.__setattr__(self, "labels", labels)

    @property
    def node_count(self) -> int:
        return self.x.shape[0]

    @property
    def edge_count(self) -> int:
        return len(self.edges)

    @property
    def dims(self) -> tuple[int, int]:
        return self.x.shape[1], self.e.shape[1]

    @cached_property
    def edge_index(self) -> dict[tuple[int, int, int], int]:
        return {(int(s), int(d), int(t)): k for k, (s, d, t) in enumerate(self.edges)}

    @cached_property
    def in_adj(self) -> list[list[tuple[int, int, int]]]:
        """Per node: incoming (src, etype, edge row) in edge order."""
        adj: list[list[tuple[int, int, int]]] = [[] for _ in range(self.node_count)]
        for k, (s, d, t) in enumerate(self.edges.tolist()):
            adj[d].append((s, t, k))
        return adj

    @cached_property
    def out_adj(self) -> list[list[tuple[int, int, int]]]:
        adj: list[list[tuple[int, int, int]]] = [[] for _ in range(self.node_count)]
        for k, (s, d, t) in enumerate(self.edges.tolist()):
            adj[s].append((d, t, k))
        return adj

    def with_edges_removed(self, rows: Sequence[int]) -> "Graph":
        keep = np.ones(self.edge_count, dtype=bool)
        keep[list(rows)] = False
        return Graph(self.x, self.edges[keep], self.e[keep], self.labels)

    def same_as(self, other: "Graph") -> bool:
        return (
            np.array_equal(self.x, other.x)
            and np.array_equal(self.edges, other.edges)
            and np.array_equal(self.e, other.e)
            and self.labels.keys() == other.labels.keys()
            and all(np.array_equal(self.labels[k], other.labels[k]) for k in self.labels)
        )


@dataclass(frozen=True)
class Dataset:
    graphs: tuple[Graph, ...]
    feature_dims: tuple[int, int]
    objectives: tuple[tuple[str, str], ...] = ()

    def __post_init__(self) -> None:
        object.__setattr__(self, "graphs", tuple(self.graphs))
        object.__setattr__(self, "feature_dims", tuple(int(v) for v in self.feature_dims))
        object.__setattr__(self, "objectives", tuple((str(a), str(b)) for a, b in self.objectives))
        for name, kind in self.objectives:
            if kind not in KINDS:
                raise DatasetError(f"objective '{name}': unknown kind '{kind}'")
        for gi, g in enumerate(self.graphs):
            if g.dims != self.feature_dims:
                raise DatasetError(f"graph {gi}: feature dims {g.dims} != {self.feature_dims}")
        for name, _ in self.objectives:
            have = [name in g.labels for g in self.graphs]
            if any(have) and not all(have):
                raise DatasetError(f"objective '{name}' labeled in some graphs only")

    def kind_of(self, name: str) -> str:
        return dict(self.objectives)[name]

    def same_as(self, other: "Dataset") -> bool:
        return (
            self.feature_dims == other.feature_dims
            and self.objectives == other.objectives
            and len(self.graphs) == len(other.graphs)
            and all(a.same_as(b) for a, b in zip(self.graphs, other.graphs))
        )


@dataclass(frozen=True)
class EgoGraph:
    graph: Graph
    center: int
    origin_map: tuple[int, ...]


def dataset_to_json(d: Dataset) -> dict:
    kinds = dict(d.objectives)
    graphs = []
    for g in d.graphs:
        labels = {}
        for name in sorted(g.labels):
            v = g.labels[name]
            if kinds.get(name) == "regression":
                labels[name] = [float(a) for a in v]
            else:
                labels[name] = [int(a) for a in v]
        graphs.append(
            {
                "n": g.node_count,
                "x": g.x,
                "edges": g.edges,
                "e": g.e,
                "labels": labels,
            }
        )
    return {
        "feature_dims": list(d.feature_dims),
        "objectives": [{"name": n, "kind": k} for n, k in d.objectives],
        "graphs": graphs,
    }


def dataset_from_json(obj: dict) -> Dataset:
    try:
        dv, de = (int(v) for v in obj["feature_dims"])
        objectives = [(o["name"], o["kind"]) for o in obj.get("objectives", [])]
        raw_graphs = obj["graphs"]
    except (KeyError, TypeError, ValueError) as exc:
        raise DatasetError(f"bad top-level structure: {exc}") from None
    kinds = dict(objectives)
    graphs = []
    for gi, rg in enumerate(raw_graphs):
        try:
            n = int(rg["n"])
            x = np.asarray(rg["x"], dtype=float).reshape(n, dv) if n else np.zeros((0, dv))
            edges = np.asarray(rg.get("edges", []), dtype=np.int64).reshape(-1, 3)
            e = np.asarray(rg.get("e", []), dtype=float).reshape(len(edges), de)
        except (KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"graph {gi}: bad field ({exc})") from None
        if len(edges) and (edges[:, :2].max() >= n or edges[:, :2].min() < 0):
            bad = "dst" if edges[:, 1].max() >= n or edges[:, 1].min() < 0 else "src"
            raise DatasetError(f"graph {gi}: field 'edges' {bad} index out of range for n={n}")
        labels = {}
        for name, vec in rg.get("labels", {}).items():
            dtype = float if kinds.get(name) == "regression" else np.int64
            labels[name] = np.asarray(vec, dtype=dtype)
        try:
            graphs.append(Graph(x, edges, e, labels))
        except DatasetError as exc:
            raise DatasetError(f"graph {gi}: {exc}") from None
    return Dataset(tuple(graphs), (dv, de), tuple(objectives))


def save_dataset(d: Dataset, path: str | Path) -> None:
    jsonio.write(dataset_to_json(d), path)


def load_dataset(path: str | Path) -> Dataset:
    try:
        obj = jsonio.read(path)
    except ValueError as exc:
        raise DatasetError(f"parse error in {path}: {exc}") from None
    return dataset_from_json(obj)


def ego_graph(g: Graph, center: int, hops: int) -> EgoGraph:
    """Nodes within `hops` steps of `center` along incoming edges."""
    if not 0 <= center < g.node_count:
        raise IndexError(f"center {center} out of range")
    dist = {center: 0}
    queue = deque([center])
    while queue:
        u = queue.popleft()
        if dist[u] == hops:
            continue
        for src, _, _ in g.in_adj[u]:
            if src not in dist:
                dist[src] = dist[u] + 1
                queue.append(src)
    nodes = sorted(dist)
    local = {v: k for k, v in enumerate(nodes)}
    rows = [k for k, (s, d, _) in enumerate(g.edges.tolist()) if s in local and d in local]
    edges = np.array([[local[s], local[d], t] for s, d, t in g.edges[rows].tolist()], dtype=np.int64)
    labels = {k: v[nodes] for k, v in g.labels.items()}
    sub = Graph(g.x[nodes], edges.reshape(-1, 3), g.e[rows], labels)
    return EgoGraph(sub, local[center], tuple(nodes))
