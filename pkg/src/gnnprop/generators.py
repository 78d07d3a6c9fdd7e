"""Synthetic algorithm-trace datasets and the backdoored classifier setup."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gnn import Gnn, GnnLayer, Objective
from .graph import Dataset, Graph
from .matching import Structure
from .nn import Affine, Fnn, Relu


def rng_for(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def _check_range(n_graphs: int, n_nodes_range: tuple[int, int]) -> None:
    lo, hi = n_nodes_range
    if n_graphs < 0 or lo < 1 or hi < lo:
        raise ValueError(f"degenerate range: n_graphs={n_graphs}, nodes={n_nodes_range}")


def random_connected_pairs(rng: np.random.Generator, n: int, degree: float = 3.0) -> list[tuple[int, int]]:
    """Undirected ER graph (expected degree `degree`) plus a random spanning tree."""
    pairs: set[tuple[int, int]] = set()
    order = rng.permutation(n)
    for k in range(1, n):
        a, b = int(order[k]), int(order[rng.integers(0, k)])
        pairs.add((min(a, b), max(a, b)))
    p = min(1.0, degree / max(n - 1, 1))
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < p:
                pairs.add((a, b))
    return sorted(pairs)


def _symmetric(pairs: list[tuple[int, int]]) -> np.ndarray:
    edges = [(a, b, 0) for a, b in pairs] + [(b, a, 0) for a, b in pairs]
    return np.array(edges, dtype=np.int64).reshape(-1, 3)


# BFS --------------------------------------------------------------------------

def bfs_step(n: int, edges: np.ndarray, s: np.ndarray) -> np.ndarray:
    out = s.copy()
    for a, b, _ in edges:
        out[b] = max(out[b], s[a])
    return out


def gen_bfs_dataset(seed: int, n_graphs: int, n_nodes_range: tuple[int, int] = (5, 12), max_steps: int = 3) -> Dataset:
    _check_range(n_graphs, n_nodes_range)
    graphs = []
    for gi in range(n_graphs):
        rng = rng_for(seed, 1, gi)
        n = int(rng.integers(n_nodes_range[0], n_nodes_range[1] + 1))
        edges = _symmetric(random_connected_pairs(rng, n))
        s = np.zeros(n)
        s[rng.integers(0, n)] = 1.0
        for _ in range(int(rng.integers(0, max_steps + 1))):
            s = bfs_step(n, edges, s)
        y = bfs_step(n, edges, s).astype(np.int64)
        graphs.append(Graph(s[:, None], edges, np.zeros((len(edges), 0)), {"state": y}))
    return Dataset(tuple(graphs), (1, 0), (("state", "classification"),))


# Bellman-Ford -----------------------------------------------------------------

W_RANGE = (0.5, 5.0)


def bf_step(edges: np.ndarray, w: np.ndarray, s: np.ndarray, d: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    s2, d2 = s.copy(), d.copy()
    for (a, b, _), wk in zip(edges, w):
        s2[b] = max(s2[b], s[a])
        d2[b] = min(d2[b], d[a] + wk)
    return s2, d2


def bellman_ford(n: int, edges: np.ndarray, w: np.ndarray, root: int) -> np.ndarray:
    dist = np.full(n, np.inf)
    dist[root] = 0.0
    for _ in range(n - 1):
        changed = False
        for (a, b, _), wk in zip(edges, w):
            if dist[a] + wk < dist[b]:
                dist[b] = dist[a] + wk
                changed = True
        if not changed:
            break
    return dist


def bf_initial(n: int, root: int) -> tuple[np.ndarray, np.ndarray]:
    d_init = (n - 1) * W_RANGE[1] + 1.0  # max possible distance plus one
    s = np.zeros(n)
    d = np.full(n, d_init)
    s[root], d[root] = 1.0, 0.0
    return s, d


def random_bf_graph(rng: np.random.Generator, n: int) -> tuple[np.ndarray, np.ndarray]:
    pairs = random_connected_pairs(rng, n)
    wp = np.round(rng.uniform(*W_RANGE, size=len(pairs)), 2)
    edges = _symmetric(pairs)
    return edges, np.concatenate([wp, wp])


def gen_bf_dataset(seed: int, n_graphs: int, n_nodes_range: tuple[int, int] = (5, 12), max_steps: int = 4) -> Dataset:
    _check_range(n_graphs, n_nodes_range)
    graphs = []
    for gi in range(n_graphs):
        rng = rng_for(seed, 3, gi)
        n = int(rng.integers(n_nodes_range[0], n_nodes_range[1] + 1))
        edges, w = random_bf_graph(rng, n)
        s, d = bf_initial(n, int(rng.integers(0, n)))
        for _ in range(int(rng.integers(0, max_steps + 1))):
            s, d = bf_step(edges, w, s, d)
        s2, d2 = bf_step(edges, w, s, d)
        g = Graph(np.stack([s, d], axis=1), edges, w[:, None], {"state": s2.astype(np.int64), "distance": d2})
        graphs.append(g)
    return Dataset(tuple(graphs), (2, 1), (("state", "classification"), ("distance", "regression")))


# DFS --------------------------------------------------------------------------

UNVISITED, UNDER, VISITED = 0, 1, 2


@dataclass
class DfsGraph:
    n: int
    arcs: list[tuple[int, int]]          # directed DFS-graph edges u -> v
    priority: np.ndarray                  # distinct integers 1..n
    succ: list[list[int]] = field(default_factory=list)
    pred: list[list[int]] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.succ = [[] for _ in range(self.n)]
        self.pred = [[] for _ in range(self.n)]
        for u, v in self.arcs:
            self.succ[u].append(v)
            self.pred[v].append(u)

    def message_edges(self) -> np.ndarray:
        # etype 0: successor v -> u ; etype 1: predecessor u -> v
        edges = [(v, u, 0) for u, v in self.arcs] + [(u, v, 1) for u, v in self.arcs]
        return np.array(edges, dtype=np.int64).reshape(-1, 3)


def random_dfs_graph(rng: np.random.Generator, n: int, p_extra: float = 0.25) -> tuple[DfsGraph, int]:
    order = [int(v) for v in rng.permutation(n)]
    arcs: set[tuple[int, int]] = set()
    for k in range(1, n):
        arcs.add((order[int(rng.integers(0, k))], order[k]))
    for a in range(n):
        for b in range(a + 1, n):
            if rng.random() < p_extra / 2:
                arcs.add((order[a], order[b]))
    pr = rng.permutation(n) + 1
    return DfsGraph(n, sorted(arcs), pr.astype(float)), order[0]


def dfs_next_state(g: DfsGraph, state: np.ndarray, target: int) -> np.ndarray:
    out = state.copy()
    if target >= 0:
        fresh = [j for j in g.succ[target] if state[j] == UNVISITED and j != target]
        out[target] = UNDER if fresh else VISITED
    return out


def dfs_next_target(g: DfsGraph, state: np.ndarray, target: int) -> int:
    if target < 0:
        return -1
    fresh = [j for j in g.succ[target] if state[j] == UNVISITED and j != target]
    if fresh:
        return max(fresh, key=lambda j: g.priority[j])
    back = [j for j in g.pred[target] if state[j] == UNDER and j != target]
    if back:
        return max(back, key=lambda j: g.priority[j])
    return -1


def dfs_trajectory(g: DfsGraph, root: int) -> list[tuple[np.ndarray, int]]:
    state = np.zeros(g.n, dtype=np.int64)
    target = root
    traj = []
    for _ in range(4 * g.n + 4):
        traj.append((state.copy(), target))
        if target < 0:
            break
        state, target = dfs_next_state(g, state, target), dfs_next_target(g, state, target)
    return traj


def dfs_features(g: DfsGraph, state: np.ndarray, target: int) -> np.ndarray:
    x = np.zeros((g.n, 5))
    x[np.arange(g.n), state] = 1.0
    if target >= 0:
        x[target, 3] = 1.0
    x[:, 4] = g.priority
    return x


def gen_dfs_dataset(seed: int, n_graphs: int, n_nodes_range: tuple[int, int] = (5, 10)) -> Dataset:
    _check_range(n_graphs, n_nodes_range)
    if n_nodes_range[1] >= 100:
        raise ValueError("priorities must stay below the construction constant")
    graphs = []
    for gi in range(n_graphs):
        rng = rng_for(seed, 2, gi)
        n = int(rng.integers(n_nodes_range[0], n_nodes_range[1] + 1))
        dg, root = random_dfs_graph(rng, n)
        traj = dfs_trajectory(dg, root)
        state, target = traj[int(rng.integers(0, len(traj)))]
        nxt_state = dfs_next_state(dg, state, target)
        nxt_target = dfs_next_target(dg, state, target)
        t_lab = np.zeros(n, dtype=np.int64)
        if nxt_target >= 0:
            t_lab[nxt_target] = 1
        graphs.append(
            Graph(dfs_features(dg, state, target), dg.message_edges(), np.zeros((2 * len(dg.arcs), 0)),
                  {"state": nxt_state.astype(np.int64), "target": t_lab})
        )
    return Dataset(tuple(graphs), (5, 0), (("state", "classification"), ("target", "classification")))


# backdoor ---------------------------------------------------------------------

ROLE_CLEAN, ROLE_VICTIM, ROLE_TRIGGER = 0, 1, 2


@dataclass(frozen=True)
class TriggerSpec:
    trigger_structure: Structure = Structure(2, ((0, 1, 0),), 1)
    trigger_feature_value: tuple[float, ...] = (0.0, 0.731)
    target_class: int = 1
    poison_rate: float = 0.05
    seed: int = 0
    n_graphs: int = 8
    n_nodes_range: tuple[int, int] = (60, 100)
    tolerance: float = 0.01

    def __post_init__(self) -> None:
        if not 0 < self.poison_rate <= 0.2:
            raise ValueError("poison_rate must be in (0, 0.2]")
        if self.target_class not in (0, 1):
            raise ValueError("target_class must be 0 or 1")
        s = self.trigger_structure
        if s.node_count != 2 or s.edges != ((0, 1, 0),) or s.target != 1:
            raise ValueError("only the single-edge trigger (trigger node -> victim) is supported")
        if len(self.trigger_feature_value) != 2:
            raise ValueError("trigger feature value must be 2-dimensional")


@dataclass(frozen=True)
class BackdoorSetup:
    model: Gnn
    train: Dataset
    test_clean: Dataset
    test_triggered: Dataset
    spec: TriggerSpec


def build_backdoored_model(spec: TriggerSpec, K: float = 1000.0) -> Gnn:
    vf, vg = spec.trigger_feature_value
    inv = 1.0 / spec.tolerance
    # layer 1: no messages; update (f, g, agg) -> (f+, f-, det)
    msg1 = Fnn((Affine(np.zeros((1, 4)), np.zeros(1)),))
    upd1 = Fnn((
        Affine(
            np.array([
                [1, 0, 0], [-1, 0, 0],          # f -vf, vf - f
                [0, 1, 0], [0, -1, 0],          # g -vg, vg - g
                [1, 0, 0], [-1, 0, 0],          # f, -f
            ], dtype=float),
            np.array([-vf, vf, -vg, vg, 0, 0]),
        ),
        Relu(6),
        Affine(
            np.array([
                [0, 0, 0, 0, 1, 0],
                [0, 0, 0, 0, 0, 1],
                [-inv, -inv, -inv, -inv, 0, 0],
            ], dtype=float),
            np.array([0.0, 0.0, 1.0]),
        ),
        Relu(3),
    ))
    l1 = GnnLayer((msg1,), "sum", upd1, self_loop=False)
    # layer 2: mean over neighbours of (f_j, det_j); logits (-mf, mf) plus K*mdet on the target class
    msg2 = Fnn((Affine(np.array([[1, -1, 0, 0, 0, 0], [0, 0, 1, 0, 0, 0]], dtype=float), np.zeros(2)),))
    boost = np.zeros(2)
    boost[spec.target_class] = K
    upd2 = Fnn((Affine(np.array([[0, 0, 0, -1, boost[0]], [0, 0, 0, 1, boost[1]]], dtype=float), np.zeros(2)),))
    l2 = GnnLayer((msg2,), "mean", upd2, self_loop=False)
    return Gnn((l1, l2), 2, 0, {"label": Objective(0, 2, "classification")})


def _benign_labels(n: int, edges: np.ndarray, f: np.ndarray) -> np.ndarray:
    tot = np.zeros(n)
    cnt = np.zeros(n)
    for a, b, _ in edges:
        tot[b] += f[a]
        cnt[b] += 1
    mean = np.where(cnt > 0, tot / np.maximum(cnt, 1), 0.0)
    return (mean > 0).astype(np.int64)


def _base_graph(rng: np.random.Generator, spec: TriggerSpec):
    n = int(rng.integers(spec.n_nodes_range[0], spec.n_nodes_range[1] + 1))
    edges = _symmetric(random_connected_pairs(rng, n))
    x = np.stack([np.round(rng.normal(size=n), 3), np.round(rng.uniform(size=n), 3)], axis=1)
    return n, edges, x


def _attach(n, edges, x, victims, spec: TriggerSpec):
    vf, vg = spec.trigger_feature_value
    k = len(victims)
    new_x = np.concatenate([x, np.tile([vf, vg], (k, 1))], axis=0)
    trig_edges = np.array([[n + i, v, 0] for i, v in enumerate(victims)], dtype=np.int64).reshape(-1, 3)
    return new_x, np.concatenate([edges, trig_edges], axis=0)


def build_backdoored_classifier(spec: TriggerSpec) -> BackdoorSetup:
    """Backdoored model plus poisoned train, clean test and triggered test sets."""
    model = build_backdoored_model(spec)
    objectives = (("label", "classification"), ("role", "classification"))

    def make(split: int, mode: str) -> Dataset:
        graphs = []
        bases = []
        for gi in range(spec.n_graphs):
            bases.append(_base_graph(rng_for(spec.seed, 4, split, gi), spec))
        total = sum(b[0] for b in bases)
        n_poison = int(round(spec.poison_rate * total)) if mode == "train" else 0
        prng = rng_for(spec.seed, 5, split)
        pick = set(prng.choice(total, size=n_poison, replace=False).tolist()) if n_poison else set()
        offset = 0
        for n, edges, x in bases:
            labels = _benign_labels(n, edges, x[:, 0])
            role = np.zeros(n, dtype=np.int64)
            if mode == "train":
                victims = sorted(v - offset for v in pick if offset <= v < offset + n)
            elif mode == "triggered":
                victims = list(range(n))
            else:
                victims = []
            offset += n
            if victims:
                x2, e2 = _attach(n, edges, x, victims, spec)
                k = len(victims)
                lab2 = np.concatenate([labels, np.zeros(k, dtype=np.int64)])
                if mode == "train":
                    lab2[victims] = spec.target_class
                role2 = np.concatenate([role, np.full(k, ROLE_TRIGGER, dtype=np.int64)])
                role2[victims] = ROLE_VICTIM
                full_n = n + k
                lab2[n:] = _benign_labels(full_n, e2, x2[:, 0])[n:]
                graphs.append(Graph(x2, e2, np.zeros((len(e2), 0)), {"label": lab2, "role": role2}))
            else:
                graphs.append(Graph(x, edges, np.zeros((len(edges), 0)), {"label": labels, "role": role}))
        return Dataset(tuple(graphs), (2, 0), objectives)

    return BackdoorSetup(model, make(0, "train"), make(1, "clean"), make(1, "triggered"), spec)
