"""Message-passing GNNs built from piecewise-linear sub-networks."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .graph import Graph
from .nn import Affine, Fnn, Relu, eval_batch, fnn_from_json, fnn_to_json

AGGS = ("sum", "mean", "max")
EMPTY_MAX = -1e9
THRESHOLD = 0.5


@dataclass(frozen=True)
class GnnLayer:
    msg: tuple[Fnn, ...]  # indexed by edge type
    agg: str
    upd: Fnn
    self_loop: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "msg", tuple(self.msg))
        if self.agg not in AGGS:
            raise ValueError(f"unknown aggregation '{self.agg}'")
        if not self.msg:
            raise ValueError("a layer needs at least one message net")
        dims = {f.output_dim for f in self.msg}
        if len(dims) != 1:
            raise ValueError("message nets of one layer must agree on output width")
        ins = {f.input_dim for f in self.msg}
        if len(ins) != 1:
            raise ValueError("message nets of one layer must agree on input width")

    @property
    def etypes(self) -> int:
        return len(self.msg)

    @property
    def msg_dim(self) -> int:
        return self.msg[0].output_dim

    @property
    def out_dim(self) -> int:
        return self.upd.output_dim


@dataclass(frozen=True)
class Objective:
    lo: int
    hi: int
    kind: str

    @property
    def width(self) -> int:
        return self.hi - self.lo

    def decide(self, y: np.ndarray) -> np.ndarray:
        """Class decision for rows of the objective slice (classification only)."""
        y = np.atleast_2d(y)
        if self.width == 1:
            return (y[:, 0] > THRESHOLD).astype(np.int64)
        return np.argmax(y, axis=1).astype(np.int64)


@dataclass(frozen=True)
class Gnn:
    layers: tuple[GnnLayer, ...]
    node_dim: int
    edge_dim: int
    objectives: Mapping[str, Objective] = field(default_factory=dict)

    def __post_init__(self) -> None:
        layers = tuple(self.layers)
        object.__setattr__(self, "layers", layers)
        object.__setattr__(self, "objectives", dict(self.objectives))
        d = self.node_dim
        for k, layer in enumerate(layers):
            if layer.msg[0].input_dim != 2 * d + self.edge_dim:
                raise ValueError(f"layer {k}: message input width mismatch")
            if layer.upd.input_dim != d + layer.msg_dim * layer.etypes:
                raise ValueError(f"layer {k}: update input width mismatch")
            d = layer.out_dim
        for name, o in self.objectives.items():
            if not 0 <= o.lo < o.hi <= d:
                raise ValueError(f"objective '{name}' slice outside output width {d}")

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim if self.layers else self.node_dim


def layer_dims(m: Gnn) -> list[int]:
    """Node feature width entering each layer, plus the final width."""
    dims = [m.node_dim]
    for layer in m.layers:
        dims.append(layer.out_dim)
    return dims


def aggregate(kind: str, msgs: np.ndarray, dst: np.ndarray, n: int) -> np.ndarray:
    out_dim = msgs.shape[1]
    if kind == "max":
        out = np.full((n, out_dim), -np.inf)
        np.maximum.at(out, dst, msgs)
        out[np.isneginf(out).all(axis=1) if out_dim else np.zeros(n, bool)] = EMPTY_MAX
        return out
    out = np.zeros((n, out_dim))
    np.add.at(out, dst, msgs)
    if kind == "mean":
        cnt = np.bincount(dst, minlength=n).astype(float)
        out /= np.maximum(cnt, 1.0)[:, None]
    return out


def layer_messages(layer: GnnLayer, h: np.ndarray, g: Graph, etype: int):
    """Messages of one edge type: (messages, destination indices)."""
    edges, e = g.edges, g.e
    sel = edges[:, 2] == etype
    src, dst, ef = edges[sel, 0], edges[sel, 1], e[sel]
    if layer.self_loop and etype == 0:
        loops = np.arange(g.node_count)
        src = np.concatenate([src, loops])
        dst = np.concatenate([dst, loops])
        ef = np.concatenate([ef, np.zeros((g.node_count, e.shape[1]))])
    inp = np.concatenate([h[src], h[dst], ef], axis=1)
    if len(inp):
        msgs = eval_batch(layer.msg[etype], inp)
    else:
        msgs = np.zeros((0, layer.msg_dim))
    return msgs, dst


def gnn_layer(layer: GnnLayer, h: np.ndarray, g: Graph) -> np.ndarray:
    if len(g.edges) and g.edges[:, 2].max() >= layer.etypes:
        raise ValueError(f"edge type {g.edges[:, 2].max()} but layer has {layer.etypes}")
    parts = [h]
    for t in range(layer.etypes):
        msgs, dst = layer_messages(layer, h, g, t)
        parts.append(aggregate(layer.agg, msgs, dst, g.node_count))
    return eval_batch(layer.upd, np.concatenate(parts, axis=1))


def gnn_forward(m: Gnn, g: Graph) -> np.ndarray:
    if g.dims != (m.node_dim, m.edge_dim):
        raise ValueError(f"graph dims {g.dims} do not match model ({m.node_dim}, {m.edge_dim})")
    h = np.asarray(g.x, dtype=float)
    for layer in m.layers:
        h = gnn_layer(layer, h, g)
    return h


def predict(m: Gnn, g: Graph, objective: str) -> np.ndarray:
    o = m.objectives[objective]
    y = gnn_forward(m, g)[:, o.lo:o.hi]
    return o.decide(y) if o.kind == "classification" else y


# JSON ----------------------------------------------------------------------

def gnn_to_json(m: Gnn) -> dict:
    return {
        "node_dim": m.node_dim,
        "edge_dim": m.edge_dim,
        "layers": [
            {
                "msg": {str(t): fnn_to_json(f) for t, f in enumerate(layer.msg)},
                "agg": layer.agg,
                "upd": fnn_to_json(layer.upd),
                "self_loop": layer.self_loop,
            }
            for layer in m.layers
        ],
        "objectives": {
            name: {"slice": [o.lo, o.hi], "kind": o.kind} for name, o in sorted(m.objectives.items())
        },
    }


def gnn_from_json(obj: dict) -> Gnn:
    layers = []
    for item in obj["layers"]:
        msg = item["msg"]
        if isinstance(msg, dict):
            msg = [msg[k] for k in sorted(msg, key=int)]
        layers.append(
            GnnLayer(tuple(fnn_from_json(f) for f in msg), item["agg"], fnn_from_json(item["upd"]), bool(item.get("self_loop", False)))
        )
    objectives = {
        name: Objective(int(o["slice"][0]), int(o["slice"][1]), o["kind"]) for name, o in obj.get("objectives", {}).items()
    }
    return Gnn(tuple(layers), int(obj["node_dim"]), int(obj["edge_dim"]), objectives)


# perturbation ------------------------------------------------------------------

def _perturb_fnn(f: Fnn, rel: float, rng: np.random.Generator) -> Fnn:
    layers = []
    for layer in f.layers:
        if isinstance(layer, Affine):
            eta_A = rng.uniform(-rel, rel, size=layer.A.shape)
            eta_b = rng.uniform(-rel, rel, size=layer.b.shape)
            layers.append(Affine(layer.A * (1 + eta_A), layer.b * (1 + eta_b)))
        else:
            layers.append(layer)
    return Fnn(tuple(layers))


def perturb_gnn(m: Gnn, rel_noise: float, seed: int) -> Gnn:
    """Multiply every affine coefficient by (1 + eta), eta ~ U[-rel_noise, rel_noise]."""
    if rel_noise < 0:
        raise ValueError("rel_noise must be >= 0")
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(101,)))
    layers = []
    for layer in m.layers:
        msg = tuple(_perturb_fnn(f, rel_noise, rng) for f in layer.msg)
        upd = _perturb_fnn(layer.upd, rel_noise, rng)
        layers.append(GnnLayer(msg, layer.agg, upd, layer.self_loop))
    return Gnn(tuple(layers), m.node_dim, m.edge_dim, m.objectives)


# reference models -------------------------------------------------------------

def _aff(A, b=None) -> Affine:
    A = np.array(A, dtype=float, ndmin=2)
    return Affine(A, np.zeros(A.shape[0]) if b is None else np.array(b, dtype=float))


def build_bfs_reference() -> Gnn:
    """One max-aggregation layer: s'_i = max over in-neighbours and i of s_j."""
    msg = Fnn((_aff([[1.0, 0.0]]),))
    upd = Fnn((_aff([[0.0, 1.0]]),))
    layer = GnnLayer((msg,), "max", upd, self_loop=True)
    return Gnn((layer,), 1, 0, {"state": Objective(0, 1, "classification")})


def build_bellman_ford_reference() -> Gnn:
    """Node features (s, d), edge feature w.

    Messages (s_j, -(d_j + w)); max aggregation; update (max s, -max(-(d+w))).
    """
    msg = Fnn((_aff([[1, 0, 0, 0, 0], [0, -1, 0, 0, -1]]),))
    upd = Fnn((_aff([[0, 0, 1, 0], [0, 0, 0, -1]]),))
    layer = GnnLayer((msg,), "max", upd, self_loop=True)
    return Gnn(
        (layer,),
        2,
        1,
        {"state": Objective(0, 1, "classification"), "distance": Objective(1, 2, "regression")},
    )


DFS_C = 100.0


def build_dfs_reference(C: float = DFS_C) -> Gnn:
    """Two-layer, two-edge-type network for one DFS step.

    Node features (s0, s1, s2, t, p): one-hot state (unvisited, under-visiting,
    visited), target flag and priority.  Edge type 0 carries forward
    neighbours (successors) to a node, type 1 carries predecessors.
    Outputs (s'0, s'1, s'2, t').
    """
    def sel(n, idx_coef):
        row = np.zeros(n)
        for i, c in idx_coef:
            row[i] += c
        return row

    # layer 1; message input = x_j (0..4), x_i (5..9)
    n = 10
    fwd = Fnn((
        Affine(
            np.array([
                sel(n, [(0, -1), (3, 1)]),                     # u = 1 - s_j0 + t_j
                sel(n, [(4, 1), (0, C), (3, -C)]),             # z = p_j - C(1 - s_j0 + t_j)
                sel(n, [(4, -1), (0, -C), (3, C)]),            # -z
            ]),
            np.array([1.0, -C, C]),
        ),
        Relu(3),
        _aff([[-1, 0, 0], [0, 1, -1]]),                        # (-relu(u), z)
    ))
    bwd = Fnn((
        Affine(
            np.array([
                sel(n, [(4, 1), (1, C), (3, -C)]),             # z = p_j - C(1 - s_j1 + t_j)
                sel(n, [(4, -1), (1, -C), (3, C)]),
            ]),
            np.array([-C, C]),
        ),
        Relu(2),
        _aff([[0, 0], [1, -1]]),
    ))
    # update input: s0 s1 s2 t p | af0 af1 | ab0 ab1
    m = 9
    upd1 = Fnn((
        Affine(
            np.array([
                sel(m, [(3, -C), (0, 1)]),                     # h0: s0 kept if not target
                sel(m, [(3, C), (5, C)]),                      # h1: -C(1-t) + C*af0 + 1
                sel(m, [(3, -C), (1, 1)]),                     # h2: s1 kept if not target
                sel(m, [(6, 1)]),                              # h3: lfu pre
                sel(m, [(8, 1)]),                              # h4: ab1
                sel(m, [(8, -1)]),                             # h5: -ab1
                sel(m, [(3, 1)]),                              # h6: t
                sel(m, [(4, 1)]),                              # h7: p
            ]),
            np.array([0.0, 1 - C, 0, 0, 0, 0, 0, 0]),
        ),
        Relu(8),
        _aff(
            [
                [1, 0, 0, 0, 0, 0, 0, 0],                      # s'0
                [0, 1, 1, 0, 0, 0, 0, 0],                      # s'1
                [-1, -1, -1, 0, 0, 0, 0, 0],                   # s'2 = 1 - s'0 - s'1
                [0, 0, 0, 0, 0, 0, 1, 0],                      # t
                [0, 0, 0, 0, 0, 0, 0, 1],                      # p
                [0, 0, 0, 1, 0, 0, 0, 0],                      # lfu
                [0, 0, 0, -C, 1, -1, 0, 0],                    # lbu pre = ab1 - C*lfu
            ],
            [0, 0, 1, 0, 0, 0, 0],
        ),
        Relu(7),
    ))
    l1 = GnnLayer((fwd, bwd), "max", upd1, self_loop=False)

    # layer 2; message input = h_j (0..6), h_i (7..13); h = s0 s1 s2 t p lfu lbu
    k = 14

    def match_msg(head: int) -> Fnn:
        return Fnn((
            Affine(
                np.array([
                    sel(k, [(head, 1), (11, -1)]),             # head_j - p_i
                    sel(k, [(head, -1), (11, 1)]),
                    sel(k, [(3, -1)]),                         # 1 - t_j
                    sel(k, [(3, 1)]),
                ]),
                np.array([0.0, 0.0, 1.0, -1.0]),
            ),
            Relu(4),
            _aff([[-C, -C, -C, C]], [1.0]),                    # 1 - C(1 - t_j + |head_j - p_i|)
        ))

    # forward neighbours of i hold a matching lbu when i is a successor being backtracked into;
    # backward (predecessor) targets choose i through lfu
    upd2 = Fnn((
        Affine(
            np.array([
                sel(m, [(0, 1)]),
                sel(m, [(1, 1)]),
                sel(m, [(2, 1)]),
                sel(m, [(8, 1), (3, -C)]),                     # from predecessor target (lfu)
                sel(m, [(7, 1), (3, -C)]),                     # from successor target (lbu)
            ]),
            np.zeros(5),
        ),
        Relu(5),
        _aff([[1, 0, 0, 0, 0], [0, 1, 0, 0, 0], [0, 0, 1, 0, 0], [0, 0, 0, 1, 1]]),
    ))
    l2 = GnnLayer((match_msg(6), match_msg(5)), "max", upd2, self_loop=False)
    return Gnn(
        (l1, l2),
        5,
        0,
        {"state": Objective(0, 3, "classification"), "target": Objective(3, 4, "classification")},
    )
