"""Likely properties over subgraph matches, aggregated features and confidence."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .gnn import Gnn, GnnLayer, aggregate, gnn_forward
from .graph import Dataset, Graph
from .inference import (ClassIs, OutputCondition, StructProperty, output_from_json, predicate_from_json,
                        predicate_to_json)
from .lowering import FeatureLayout
from .lp import Constraints
from .matching import DEFAULT_CAP, Structure, enumerate_subiso_matches
from .nn import eval_batch

TREE_DEPTH = 4
TREE_MIN_LEAF = 5
RIDGE = 1e-8
CHECK_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class LikelyProperty:
    structure: Structure
    objective: str
    inps: Constraints
    out: OutputCondition
    support: int
    mode: str = "subiso"


def relax(p: StructProperty) -> LikelyProperty:
    """Widen the structure predicate from isomorphism to subgraph isomorphism."""
    if not p.verified:
        raise ValueError("only verified properties are relaxed")
    return LikelyProperty(p.structure, p.objective, p.inps, p.out, p.support)


# aggregated features ------------------------------------------------------------------

class AggComputer:
    """First-layer aggregates of one graph, in-structure and full-neighbourhood."""

    def __init__(self, m: Gnn, g: Graph) -> None:
        self.layer: GnnLayer = m.layers[0]
        self.g = g
        layer = self.layer
        x, e = g.x, g.e
        self.edge_msg = np.zeros((g.edge_count, layer.msg_dim))
        for t in range(layer.etypes):
            rows = np.flatnonzero(g.edges[:, 2] == t)
            if len(rows):
                src, dst = g.edges[rows, 0], g.edges[rows, 1]
                self.edge_msg[rows] = eval_batch(layer.msg[t], np.concatenate([x[src], x[dst], e[rows]], axis=1))
        if layer.self_loop:
            inp = np.concatenate([x, x, np.zeros((g.node_count, e.shape[1]))], axis=1)
            self.loop_msg = eval_batch(layer.msg[0], inp)
        else:
            self.loop_msg = None
        self.full = np.zeros((g.node_count, layer.etypes * layer.msg_dim))
        M = layer.msg_dim
        for t in range(layer.etypes):
            rows = np.flatnonzero(g.edges[:, 2] == t)
            msgs, dst = self.edge_msg[rows], g.edges[rows, 1]
            if layer.self_loop and t == 0:
                msgs = np.concatenate([msgs, self.loop_msg])
                dst = np.concatenate([dst, np.arange(g.node_count)])
            self.full[:, t * M:(t + 1) * M] = aggregate(layer.agg, msgs, dst, g.node_count)

    def in_structure(self, host: int, rows_by_type: list[list[int]]) -> np.ndarray:
        layer, M = self.layer, self.layer.msg_dim
        out = np.zeros(layer.etypes * M)
        for t in range(layer.etypes):
            msgs = self.edge_msg[rows_by_type[t]]
            if layer.self_loop and t == 0:
                msgs = np.concatenate([msgs, self.loop_msg[host:host + 1]])
            out[t * M:(t + 1) * M] = aggregate(layer.agg, msgs, np.zeros(len(msgs), dtype=np.int64), 1)[0]
        return out

    def features(self, s: Structure, match: Sequence[int]) -> np.ndarray:
        idx = self.g.edge_index
        parts = []
        for i in range(s.node_count):
            host = match[i]
            rows: list[list[int]] = [[] for _ in range(self.layer.etypes)]
            for a, b, t in s.edges:
                if b == i:
                    rows[t].append(idx[(match[a], host, t)])
            x_in = self.in_structure(host, rows)
            x_full = self.full[host]
            parts.extend([x_in, x_full, x_full - x_in])
        return np.concatenate(parts)


def compute_agg_features(m: Gnn, g: Graph, s: Structure, match: Sequence[int]) -> np.ndarray:
    return AggComputer(m, g).features(s, match)


def agg_feature_names(m: Gnn, s: Structure) -> list[str]:
    layer = m.layers[0]
    names = []
    for i in range(s.node_count):
        for part in ("in", "full", "diff"):
            for t in range(layer.etypes):
                for q in range(layer.msg_dim):
                    names.append(f"n{i}.{part}.t{t}.m{q}")
    return names


# decision tree ----------------------------------------------------------------

@dataclass
class TreeNode:
    n: int
    n_holds: int
    feature: int = -1
    threshold: float = 0.0
    left: Optional["TreeNode"] = None
    right: Optional["TreeNode"] = None

    @property
    def is_leaf(self) -> bool:
        return self.left is None

    @property
    def label(self) -> bool:
        return self.n_holds > self.n - self.n_holds


@dataclass
class Tree:
    root: TreeNode
    n_features: int

    def predict(self, F: np.ndarray) -> np.ndarray:
        F = np.atleast_2d(F)
        out = np.zeros(len(F), dtype=bool)
        for k, row in enumerate(F):
            node = self.root
            while not node.is_leaf:
                node = node.left if row[node.feature] <= node.threshold else node.right
            out[k] = node.label
        return out


def _impurity(n: np.ndarray, h: np.ndarray) -> np.ndarray:
    """n * gini for count n with h positives."""
    n = n.astype(float)
    h = h.astype(float)
    with np.errstate(invalid="ignore", divide="ignore"):
        val = n - (h * h + (n - h) * (n - h)) / n
    return np.where(n > 0, val, 0.0)


def _best_split(F: np.ndarray, y: np.ndarray, min_leaf: int):
    n = len(y)
    parent = float(_impurity(np.array([n]), np.array([y.sum()]))[0])
    best = None
    best_val = parent - 1e-12
    for f in range(F.shape[1]):
        order = np.argsort(F[:, f], kind="stable")
        vals, ys = F[order, f], y[order]
        cum = np.cumsum(ys)
        # split after position k-1 (left = first k samples) where vals differ
        ks = np.flatnonzero(vals[1:] != vals[:-1]) + 1
        ks = ks[(ks >= min_leaf) & (n - ks >= min_leaf)]
        if not len(ks):
            continue
        hl = cum[ks - 1]
        imp = _impurity(ks, hl) + _impurity(n - ks, cum[-1] - hl)
        j = int(np.argmin(imp))
        if imp[j] < best_val:
            best_val = float(imp[j])
            k = int(ks[j])
            best = (f, (vals[k - 1] + vals[k]) / 2.0)
    return best


def fit_decision_tree(F: np.ndarray, holds: np.ndarray, max_depth: int = TREE_DEPTH,
                      min_leaf: int = TREE_MIN_LEAF) -> Tree:
    """CART with Gini impurity and midpoint thresholds."""
    F = np.asarray(F, dtype=float)
    y = np.asarray(holds, dtype=bool).astype(np.int64)
    if len(y) == 0:
        raise ValueError("need at least one sample")

    def build(idx: np.ndarray, depth: int) -> TreeNode:
        node = TreeNode(len(idx), int(y[idx].sum()))
        if depth >= max_depth or node.n_holds in (0, node.n) or len(idx) < 2 * min_leaf:
            return node
        split = _best_split(F[idx], y[idx], min_leaf)
        if split is None:
            return node
        f, thr = split
        mask = F[idx, f] <= thr
        node.feature, node.threshold = f, float(thr)
        node.left = build(idx[mask], depth + 1)
        node.right = build(idx[~mask], depth + 1)
        return node

    return Tree(build(np.arange(len(y)), 0), F.shape[1])


def tree_to_predicates(t: Tree) -> list[Constraints]:
    """One conjunction per path ending in a holds-leaf."""
    n = t.n_features
    out: list[Constraints] = []

    def walk(node: TreeNode, rows: list) -> None:
        if node.is_leaf:
            if node.label:
                out.append(Constraints.of(rows, n))
            return
        e = np.zeros(n)
        e[node.feature] = 1.0
        walk(node.left, rows + [(e, node.threshold, False)])
        walk(node.right, rows + [(-e, -node.threshold, True)])

    walk(t.root, [])
    return out


def fit_regression(F: np.ndarray, dev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Least squares with intercept; returns (coef [k x A], intercept [k])."""
    F = np.atleast_2d(np.asarray(F, dtype=float))
    Y = np.asarray(dev, dtype=float)
    Y = Y.reshape(len(F), -1)
    mu = F.mean(axis=0)
    sd = F.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    Z = (F - mu) / sd
    ybar = Y.mean(axis=0)
    G = Z.T @ Z + RIDGE * np.eye(Z.shape[1])
    beta = np.linalg.solve(G, Z.T @ (Y - ybar))
    coef = (beta / sd[:, None]).T
    intercept = ybar - coef @ mu
    return coef, intercept


# evaluation -------------------------------------------------------------------

def predicate_mask(p: Constraints, X: np.ndarray) -> np.ndarray:
    if len(X) == 0:
        return np.zeros(0, dtype=bool)
    if len(p) == 0:
        return np.ones(len(X), dtype=bool)
    s = X @ p.C.T - p.d
    ok = np.where(p.strict[None, :], s < -1e-12, s <= CHECK_TOL)
    return ok.all(axis=1)


def dyna_mask(dyna: Sequence[Constraints], A: np.ndarray) -> np.ndarray:
    out = np.zeros(len(A), dtype=bool)
    for conj in dyna:
        out |= predicate_mask(conj, A)
    return out


class Instances:
    """Cached matches, gathered features, outputs and aggregates over a dataset."""

    def __init__(self, m: Gnn, d: Dataset, cap: int = DEFAULT_CAP) -> None:
        self.m, self.d, self.cap = m, d, cap
        self._fwd: dict[int, np.ndarray] = {}
        self._agg: dict[int, AggComputer] = {}
        self._cache: dict[tuple, dict] = {}

    def forward(self, gi: int) -> np.ndarray:
        if gi not in self._fwd:
            self._fwd[gi] = gnn_forward(self.m, self.d.graphs[gi])
        return self._fwd[gi]

    def aggc(self, gi: int) -> AggComputer:
        if gi not in self._agg:
            self._agg[gi] = AggComputer(self.m, self.d.graphs[gi])
        return self._agg[gi]

    def of(self, s: Structure) -> dict:
        if s.key in self._cache:
            return self._cache[s.key]
        layout = FeatureLayout(s, self.m.node_dim, self.m.edge_dim)
        gids, maps, truncated, left = [], [], False, self.cap
        for gi, g in enumerate(self.d.graphs):
            if left <= 0:
                truncated = True
                break
            res = enumerate_subiso_matches(g, s, left)
            truncated |= res.truncated
            for mt in res.matches:
                gids.append(gi)
                maps.append(mt)
            left -= len(res.matches)
        if maps:
            X = np.stack([layout.gather(self.d.graphs[gi], mt) for gi, mt in zip(gids, maps)])
        else:
            X = np.zeros((0, layout.input_dim))
        entry = {"gids": np.array(gids, dtype=np.int64), "maps": maps, "X": X, "layout": layout,
                 "truncated": truncated, "agg": None}
        self._cache[s.key] = entry
        return entry

    def hosts(self, s: Structure) -> np.ndarray:
        e = self.of(s)
        return np.array([mt[s.target] for mt in e["maps"]], dtype=np.int64)

    def outputs(self, s: Structure, lo: int, hi: int) -> np.ndarray:
        e = self.of(s)
        if not e["maps"]:
            return np.zeros((0, hi - lo))
        return np.stack([self.forward(int(gi))[mt[s.target], lo:hi] for gi, mt in zip(e["gids"], e["maps"])])

    def agg(self, s: Structure) -> np.ndarray:
        e = self.of(s)
        if e["agg"] is None:
            dim = len(agg_feature_names(self.m, s))
            if e["maps"]:
                e["agg"] = np.stack([self.aggc(int(gi)).features(s, mt) for gi, mt in zip(e["gids"], e["maps"])])
            else:
                e["agg"] = np.zeros((0, dim))
        return e["agg"]


@dataclass
class ConfidenceReport:
    kind: str
    support_prior: int
    support_full: int
    pa_prior: float = float("nan")
    pa_full: float = float("nan")
    ir: float = float("nan")
    pe_prior: float = float("nan")
    pe_full: float = float("nan")
    rr: float = float("nan")

    @property
    def undefined(self) -> bool:
        return self.support_full == 0

    def to_json(self) -> dict:
        out: dict = {"kind": self.kind, "support_prior": self.support_prior, "support_full": self.support_full,
                     "undefined": self.undefined}
        keys = ("pa_prior", "pa_full", "ir") if self.kind == "classification" else ("pe_prior", "pe_full", "rr")
        for k in keys:
            v = getattr(self, k)
            out[k] = None if not np.isfinite(v) else float(v)
        return out

    @staticmethod
    def from_json(obj: dict) -> "ConfidenceReport":
        rep = ConfidenceReport(obj["kind"], int(obj["support_prior"]), int(obj["support_full"]))
        for k in ("pa_prior", "pa_full", "ir", "pe_prior", "pe_full", "rr"):
            if obj.get(k) is not None:
                setattr(rep, k, float(obj[k]))
        return rep


@dataclass(frozen=True, eq=False)
class DynProperty:
    base: LikelyProperty
    dyna: Optional[tuple[Constraints, ...]] = None          # classification; None = no dynamic condition
    out_dyna: Optional[tuple[np.ndarray, np.ndarray]] = None  # regression (coef, intercept)
    confidence: Optional[ConfidenceReport] = None
    verified_base: bool = True

    @property
    def structure(self) -> Structure:
        return self.base.structure

    @property
    def objective(self) -> str:
        return self.base.objective

    def to_json(self) -> dict:
        b = self.base
        out = {
            "structure": b.structure.to_json(),
            "objective": b.objective,
            "mode": b.mode,
            "inps": predicate_to_json(b.inps),
            "out": b.out.to_json(),
            "verified": False,
            "support": b.support,
        }
        if isinstance(b.out, ClassIs):
            out["dyna"] = None if self.dyna is None else [predicate_to_json(c) for c in self.dyna]
        else:
            out["out_dyna"] = None if self.out_dyna is None else {"coef": self.out_dyna[0], "intercept": self.out_dyna[1]}
        out["confidence"] = None if self.confidence is None else self.confidence.to_json()
        return out


def _as_likely(p) -> LikelyProperty:
    if isinstance(p, DynProperty):
        return p.base
    if isinstance(p, StructProperty):
        return LikelyProperty(p.structure, p.objective, p.inps, p.out, p.support)
    return p


def input_mask(p, inst: Instances, use_dyna: bool = True) -> np.ndarray:
    """Which matches of p's structure satisfy its full input condition."""
    base = _as_likely(p)
    e = inst.of(base.structure)
    mask = predicate_mask(base.inps, e["X"])
    if use_dyna and isinstance(p, DynProperty) and p.dyna is not None and mask.any():
        A = inst.agg(base.structure)
        mask &= dyna_mask(p.dyna, A)
    return mask


def _ratio(a: float, b: float, floor: float) -> float:
    return a / max(b, floor)


def evaluate_confidence(p, m: Gnn, d: Dataset | Instances, cap: int = DEFAULT_CAP) -> ConfidenceReport:
    """PA / PE of a likely or dynamic property measured against the full graph outputs."""
    inst = d if isinstance(d, Instances) else Instances(m, d, cap)
    base = _as_likely(p)
    s = base.structure
    o = m.objectives[base.objective]
    e = inst.of(s)
    prior = input_mask(base, inst)
    full = input_mask(p, inst) if isinstance(p, DynProperty) else prior
    Y = inst.outputs(s, o.lo, o.hi)
    rep = ConfidenceReport(o.kind, int(prior.sum()), int(full.sum()))
    if isinstance(base.out, ClassIs):
        ok = base.out.holds(Y) if len(Y) else np.zeros(0, dtype=bool)
        if prior.any():
            rep.pa_prior = float(ok[prior].mean())
        if full.any():
            rep.pa_full = float(ok[full].mean())
            rep.ir = _ratio(rep.pa_full - rep.pa_prior, rep.pa_prior, 1e-9)
        return rep
    X = e["X"]
    dev = base.out.deviation(X, Y) if len(X) else np.zeros((0, o.width))
    if prior.any():
        rep.pe_prior = float(np.mean(dev[prior] ** 2))
    if full.any():
        res = dev[full]
        if isinstance(p, DynProperty) and p.out_dyna is not None:
            coef, icpt = p.out_dyna
            res = res - (inst.agg(s)[full] @ coef.T + icpt)
        rep.pe_full = float(np.mean(res ** 2))
        rep.rr = _ratio(rep.pe_prior - rep.pe_full, rep.pe_prior, 1e-12)
    return rep


@dataclass
class DynamicConfig:
    max_depth: int = TREE_DEPTH
    min_leaf: int = TREE_MIN_LEAF


def dynamic_analysis(lp: LikelyProperty, m: Gnn, inst: Instances, cfg: DynamicConfig | None = None,
                     verified_base: bool = True) -> DynProperty:
    """Fit the dynamic condition (classification) or term (regression) on `inst`."""
    cfg = cfg or DynamicConfig()
    o = m.objectives[lp.objective]
    s = lp.structure
    prior = input_mask(lp, inst)
    if not prior.any():
        dp = DynProperty(lp, verified_base=verified_base)
        return DynProperty(lp, confidence=evaluate_confidence(dp, m, inst), verified_base=verified_base)
    A = inst.agg(s)[prior]
    Y = inst.outputs(s, o.lo, o.hi)[prior]
    if isinstance(lp.out, ClassIs):
        ok = lp.out.holds(Y)
        dyna = None
        if not ok.all():
            tree = fit_decision_tree(A, ok, cfg.max_depth, cfg.min_leaf)
            dyna = tuple(tree_to_predicates(tree))
        dp = DynProperty(lp, dyna=dyna, verified_base=verified_base)
    else:
        X = inst.of(s)["X"][prior]
        dev = lp.out.deviation(X, Y)
        out_dyna = None
        if np.any(np.abs(dev) > lp.out.tol):
            out_dyna = fit_regression(A, dev)
        dp = DynProperty(lp, out_dyna=out_dyna, verified_base=verified_base)
    return DynProperty(dp.base, dp.dyna, dp.out_dyna, evaluate_confidence(dp, m, inst), verified_base)


def dyn_property_from_json(obj: dict, m: Gnn) -> DynProperty:
    """Inverse of DynProperty.to_json; dimensions are taken from the model."""
    s = Structure.from_json(obj["structure"])
    name = obj["objective"]
    if name not in m.objectives:
        raise ValueError(f"unknown objective '{name}'")
    o = m.objectives[name]
    n_in = FeatureLayout(s, m.node_dim, m.edge_dim).input_dim
    n_agg = len(agg_feature_names(m, s))
    base = LikelyProperty(s, name, predicate_from_json(obj["inps"], n_in), output_from_json(obj["out"], name, o.width),
                          int(obj.get("support", 0)), obj.get("mode", "subiso"))
    dyna = out_dyna = None
    if obj.get("dyna") is not None:
        dyna = tuple(predicate_from_json(c, n_agg) for c in obj["dyna"])
    if obj.get("out_dyna") is not None:
        coef = np.asarray(obj["out_dyna"]["coef"], dtype=float).reshape(o.width, n_agg)
        out_dyna = (coef, np.asarray(obj["out_dyna"]["intercept"], dtype=float).reshape(o.width))
    conf = ConfidenceReport.from_json(obj["confidence"]) if obj.get("confidence") else None
    return DynProperty(base, dyna, out_dyna, conf)
