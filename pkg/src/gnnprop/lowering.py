"""Lowering a GNN on a fixed structure to an equivalent feed-forward network.

The GNN is first executed symbolically over the flat feature layout.  Every
ReLU unit and every max over two or more operands becomes a node of a DAG
whose operands are affine expressions of earlier nodes.  The DAG is then
compiled stage by stage (one nonlinear layer per DAG depth).  A stage made
only of ReLUs becomes Affine + Relu; otherwise it becomes Affine + MaxPool
where a ReLU is max(0, pre) with the zero first (so ties stay inactive) and
values needed by later stages ride along as uncovered indices.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gnn import EMPTY_MAX, Gnn, gnn_forward
from .matching import Structure, structure_as_graph
from .nn import Affine, Fnn, MaxPool, Relu, eval_batch


@dataclass(frozen=True)
class FeatureLayout:
    structure: Structure
    node_dim: int
    edge_dim: int

    @property
    def input_dim(self) -> int:
        return self.structure.node_count * self.node_dim + len(self.structure.edges) * self.edge_dim

    def node_slice(self, j: int) -> slice:
        return slice(j * self.node_dim, (j + 1) * self.node_dim)

    def edge_slice(self, k: int) -> slice:
        base = self.structure.node_count * self.node_dim
        return slice(base + k * self.edge_dim, base + (k + 1) * self.edge_dim)

    def gather(self, g, match: Sequence[int]) -> np.ndarray:
        """Flat input vector for a match of the structure into graph g."""
        parts = [g.x[list(match)].reshape(-1)]
        if self.edge_dim and self.structure.edges:
            idx = g.edge_index
            rows = [idx[(match[a], match[b], t)] for a, b, t in self.structure.edges]
            parts.append(g.e[rows].reshape(-1))
        return np.concatenate(parts) if parts else np.zeros(0)

    def split(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Node feature matrix and edge feature matrix from a flat vector."""
        n, k = self.structure.node_count, len(self.structure.edges)
        xs = x[: n * self.node_dim].reshape(n, self.node_dim)
        es = x[n * self.node_dim:].reshape(k, self.edge_dim)
        return xs, es

    def names(self) -> list[str]:
        out = [f"n{j}.x{q}" for j in range(self.structure.node_count) for q in range(self.node_dim)]
        out += [f"e{k}.w{q}" for k in range(len(self.structure.edges)) for q in range(self.edge_dim)]
        return out


@dataclass(frozen=True)
class LoweredModel:
    fnn: Fnn
    layout: FeatureLayout
    target_output_slice: tuple[int, int]
    output_mode: str


class _Sym:
    """Vector of affine expressions M @ nodes + c over the DAG nodes created so far."""

    __slots__ = ("M", "c")

    def __init__(self, M: np.ndarray, c: np.ndarray) -> None:
        self.M, self.c = M, c

    def __len__(self) -> int:
        return len(self.c)


class _Dag:
    def __init__(self, n_inputs: int) -> None:
        self.kind: list[str] = ["in"] * n_inputs
        self.ops: list[list[tuple[np.ndarray, float]]] = [[] for _ in range(n_inputs)]
        self.depth: list[int] = [0] * n_inputs

    @property
    def size(self) -> int:
        return len(self.kind)

    def pad(self, v: _Sym) -> _Sym:
        if v.M.shape[1] < self.size:
            v = _Sym(np.pad(v.M, ((0, 0), (0, self.size - v.M.shape[1]))), v.c)
        return v

    def cat(self, parts: Sequence[_Sym]) -> _Sym:
        parts = [self.pad(p) for p in parts]
        return _Sym(np.vstack([p.M for p in parts]), np.concatenate([p.c for p in parts]))

    def _new(self, kind: str, operands: list[tuple[np.ndarray, float]]) -> int:
        dep = 0
        for row, _ in operands:
            nz = np.flatnonzero(row)
            if len(nz):
                dep = max(dep, max(self.depth[j] for j in nz))
        self.kind.append(kind)
        self.ops.append(operands)
        self.depth.append(dep + 1)
        return self.size - 1

    def unit(self, j: int) -> np.ndarray:
        row = np.zeros(self.size)
        row[j] = 1.0
        return row

    def relu(self, v: _Sym) -> _Sym:
        rows, consts = [], []
        for r in range(len(v)):
            row, c = v.M[r], float(v.c[r])
            if not row.any():
                rows.append(None); consts.append(max(c, 0.0))
            else:
                j = self._new("relu", [(row.copy(), c)])
                rows.append(j); consts.append(0.0)
        return self._assemble(rows, consts)

    def max_of(self, operands: list[tuple[np.ndarray, float]]) -> tuple[Optional[int], np.ndarray, float]:
        """Max of affine operands; returns (node id or None, row, const)."""
        if len(operands) == 1:
            return None, operands[0][0], operands[0][1]
        if not any(row.any() for row, _ in operands):
            return None, np.zeros(0), max(c for _, c in operands)
        j = self._new("max", [(row.copy(), float(c)) for row, c in operands])
        return j, np.zeros(0), 0.0

    def _assemble(self, items, consts) -> _Sym:
        M = np.zeros((len(items), self.size))
        for r, it in enumerate(items):
            if it is None:
                continue
            if isinstance(it, (int, np.integer)):
                M[r, it] = 1.0
            else:
                M[r, : len(it)] = it
        return _Sym(M, np.array(consts, dtype=float))

    def pool(self, v: _Sym, layer: MaxPool) -> _Sym:
        items, consts = [], []
        for p in layer.partitions:
            j, row, c = self.max_of([(v.M[i], float(v.c[i])) for i in p])
            items.append(j if j is not None else row)
            consts.append(c)
        for i in layer.passthrough:
            items.append(v.M[i]); consts.append(float(v.c[i]))
        return self._assemble(items, consts)

    def apply(self, f: Fnn, v: _Sym) -> _Sym:
        for layer in f.layers:
            if isinstance(layer, Affine):
                v = self.pad(v)
                v = _Sym(layer.A @ v.M, layer.A @ v.c + layer.b)
            elif isinstance(layer, Relu):
                v = self.relu(self.pad(v))
            else:
                v = self.pool(self.pad(v), layer)
        return self.pad(v)


def _incoming(s: Structure, j: int, etype: int, self_loop: bool):
    items = [(a, b, t, k) for k, (a, b, t) in enumerate(s.edges) if b == j and t == etype]
    if self_loop and etype == 0:
        items.append((j, j, 0, None))
    items.sort(key=lambda z: (z[0], z[1], z[2], -1 if z[3] is None else z[3]))
    return items


def _symbolic(m: Gnn, s: Structure, layout: FeatureLayout) -> tuple[_Dag, list[_Sym]]:
    n = s.node_count
    dag = _Dag(layout.input_dim)
    eye = np.eye(layout.input_dim)
    H = [_Sym(eye[layout.node_slice(j)], np.zeros(m.node_dim)) for j in range(n)]
    E = [_Sym(eye[layout.edge_slice(k)], np.zeros(m.edge_dim)) for k in range(len(s.edges))]
    zero_e = _Sym(np.zeros((m.edge_dim, layout.input_dim)), np.zeros(m.edge_dim))
    for li, layer in enumerate(m.layers):
        if any(t >= layer.etypes for _, _, t in s.edges):
            raise ValueError(f"structure uses edge type beyond layer {li}'s {layer.etypes}")
        newH = []
        for j in range(n):
            parts = [H[j]]
            for t in range(layer.etypes):
                msgs = []
                for a, _, _, k in _incoming(s, j, t, layer.self_loop):
                    inp = dag.cat([H[a], H[j], E[k] if k is not None else zero_e])
                    msgs.append(dag.apply(layer.msg[t], inp))
                parts.append(_aggregate(dag, layer.agg, msgs, layer.msg_dim))
            newH.append(dag.apply(layer.upd, dag.cat(parts)))
        H = newH
    return dag, H


def _aggregate(dag: _Dag, kind: str, msgs: list[_Sym], width: int) -> _Sym:
    if not msgs:
        fill = EMPTY_MAX if kind == "max" else 0.0
        return _Sym(np.zeros((width, dag.size)), np.full(width, fill))
    msgs = [dag.pad(v) for v in msgs]
    if kind in ("sum", "mean"):
        M = sum(v.M for v in msgs[1:]) if len(msgs) > 1 else None
        M = msgs[0].M + M if M is not None else msgs[0].M.copy()
        c = msgs[0].c.copy()
        for v in msgs[1:]:
            c = c + v.c
        if kind == "mean":
            M, c = M / len(msgs), c / len(msgs)
        return _Sym(M, c)
    items, consts = [], []
    for q in range(width):
        j, row, c = dag.max_of([(v.M[q], float(v.c[q])) for v in msgs])
        items.append(j if j is not None else row)
        consts.append(c)
    return dag._assemble(items, consts)


def _compile(dag: _Dag, out: _Sym, n_inputs: int) -> Fnn:
    out = dag.pad(out)
    N = dag.size
    out_users = np.flatnonzero(out.M.any(axis=0))
    needed = np.zeros(N, dtype=bool)
    needed[out_users] = True
    frontier = list(out_users)
    while frontier:
        j = frontier.pop()
        for row, _ in dag.ops[j]:
            for q in np.flatnonzero(row):
                if not needed[q]:
                    needed[q] = True
                    frontier.append(q)
    D = max((dag.depth[j] for j in range(N) if needed[j]), default=0)
    # last stage at which each node is read
    use_level = np.zeros(N, dtype=int)
    for j in np.flatnonzero(needed):
        for row, _ in dag.ops[j]:
            for q in np.flatnonzero(row):
                use_level[q] = max(use_level[q], dag.depth[j])
    use_level[out_users] = D + 1

    layers: list = []
    current = list(range(n_inputs))  # stage input vector, as DAG node ids
    for k in range(1, D + 1):
        pos = {v: i for i, v in enumerate(current)}
        width = len(current)

        def row_of(vec: np.ndarray) -> np.ndarray:
            r = np.zeros(width)
            for q in np.flatnonzero(vec):
                r[pos[q]] += vec[q]
            return r

        level = [j for j in range(N) if needed[j] and dag.depth[j] == k]
        relus = [j for j in level if dag.kind[j] == "relu"]
        maxes = [j for j in level if dag.kind[j] == "max"]
        carries = [v for v in current if use_level[v] > k]
        rows, consts = [], []
        if not maxes and not carries:
            for j in relus:
                vec, c = dag.ops[j][0]
                rows.append(row_of(vec)); consts.append(c)
            layers.append(Affine(np.array(rows).reshape(len(rows), width), np.array(consts)))
            layers.append(Relu(len(rows)))
            current = relus
            continue
        parts = []
        for j in relus:
            vec, c = dag.ops[j][0]
            parts.append((len(rows), len(rows) + 1))
            rows.append(np.zeros(width)); consts.append(0.0)
            rows.append(row_of(vec)); consts.append(c)
        for j in maxes:
            start = len(rows)
            for vec, c in dag.ops[j]:
                rows.append(row_of(vec)); consts.append(c)
            parts.append(tuple(range(start, len(rows))))
        for v in carries:
            r = np.zeros(width)
            r[pos[v]] = 1.0
            rows.append(r); consts.append(0.0)
        A = np.array(rows).reshape(len(rows), width)
        layers.append(Affine(A, np.array(consts)))
        layers.append(MaxPool(len(rows), tuple(tuple(p) for p in parts)))
        current = relus + maxes + carries
    pos = {v: i for i, v in enumerate(current)}
    W = np.zeros((len(out), len(current)))
    for r in range(len(out)):
        for q in np.flatnonzero(out.M[r]):
            W[r, pos[q]] += out.M[r, q]
    layers.append(Affine(W, out.c.copy()))
    return Fnn(tuple(layers))


def lower(m: Gnn, s: Structure, outputs: str | tuple[int, int] = "all") -> LoweredModel:
    """Equivalent FNN of `m` on structure `s` over the flat feature layout.

    outputs: "all" (every node's final features, node-major), "target", or a
    (lo, hi) slice of the target's final features.
    """
    layout = FeatureLayout(s, m.node_dim, m.edge_dim)
    dag, H = _symbolic(m, s, layout)
    D = m.out_dim
    if outputs == "all":
        out = dag.cat(H)
        sl = (s.target * D, (s.target + 1) * D)
    elif outputs == "target":
        out = H[s.target]
        sl = (0, D)
    else:
        lo, hi = outputs
        if not 0 <= lo < hi <= D:
            raise ValueError(f"output slice {outputs} outside width {D}")
        t = H[s.target]
        out = _Sym(t.M[lo:hi], t.c[lo:hi])
        sl = (0, hi - lo)
        outputs = f"slice:{lo}:{hi}"
    fnn = _compile(dag, out, layout.input_dim)
    return LoweredModel(fnn, layout, sl, str(outputs))


@dataclass(frozen=True)
class EquivalenceReport:
    max_dev: float
    trials: int
    failing_input: Optional[np.ndarray]

    @property
    def passed(self) -> bool:
        return self.failing_input is None


def reference_outputs(m: Gnn, s: Structure, layout: FeatureLayout, x: np.ndarray) -> np.ndarray:
    xs, es = layout.split(x)
    g = structure_as_graph(s, xs, es)
    return gnn_forward(m, g)


def equivalence_check(m: Gnn, s: Structure, lm: LoweredModel, trials: int = 100, tol: float = 1e-9,
                      seed: int = 0, scale: float = 2.0) -> EquivalenceReport:
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.normal(scale=scale, size=(trials, lm.layout.input_dim))
    Y = eval_batch(lm.fnn, X)
    worst, failing = 0.0, None
    for x, y in zip(X, Y):
        ref = reference_outputs(m, s, lm.layout, x)
        if lm.output_mode == "all":
            ref = ref.reshape(-1)
        elif lm.output_mode == "target":
            ref = ref[s.target]
        else:
            _, lo, hi = lm.output_mode.split(":")
            ref = ref[s.target, int(lo):int(hi)]
        dev = float(np.max(np.abs(ref - y))) if len(y) else 0.0
        if dev > worst:
            worst = dev
        if dev >= tol and failing is None:
            failing = x.copy()
    return EquivalenceReport(worst, trials, failing)
