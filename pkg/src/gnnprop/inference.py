"""Structure-specific property inference on lowered networks.

Instances of a structure are pushed through its lowered network; instances
sharing an activation pattern and output decision form a group whose linear
region (plus the output-decision rows) is a candidate input predicate.
Constraints are then dropped greedily as long as the property stays proven.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .gnn import THRESHOLD, Objective
from .lowering import LoweredModel
from .lp import Constraints, LPIndeterminate, lp_feasible
from .matching import Structure
from .nn import Affine, ActivationTrace, Fnn, Relu, eval_batch, region_of, traces_from_batch

AFFINE_TOL = 1e-9
DEFAULT_LP_BUDGET = 400


# output conditions -----------------------------------------------------------------

@dataclass(frozen=True)
class ClassIs:
    objective: str
    cls: int
    width: int

    def holds(self, y: np.ndarray) -> np.ndarray:
        y = np.atleast_2d(y)
        dec = (y[:, 0] > THRESHOLD).astype(int) if self.width == 1 else np.argmax(y, axis=1)
        return dec == self.cls

    def decision_rows(self, W: np.ndarray, v: np.ndarray) -> Constraints:
        """Rows forcing the decision on the affine output W x + v."""
        n = W.shape[1]
        if self.width == 1:
            if self.cls == 1:
                return Constraints.of([(-W[0], v[0] - THRESHOLD, True)], n)
            return Constraints.of([(W[0], THRESHOLD - v[0], False)], n)
        c = self.cls
        rows = [(W[r] - W[c], v[c] - v[r], r < c) for r in range(self.width) if r != c]
        return Constraints.of(rows, n)

    def violation_rows(self, W: np.ndarray, v: np.ndarray) -> list[Constraints]:
        """Disjuncts of the negated condition, one system each."""
        n = W.shape[1]
        if self.width == 1:
            if self.cls == 1:
                return [Constraints.of([(W[0], THRESHOLD - v[0], False)], n)]
            return [Constraints.of([(-W[0], v[0] - THRESHOLD, True)], n)]
        c = self.cls
        out = []
        for r in range(self.width):
            if r == c:
                continue
            # rival r wins: y_r >= y_c (r < c) or y_r > y_c (r > c)
            out.append(Constraints.of([(W[c] - W[r], v[r] - v[c], r > c)], n))
        return out

    def to_json(self) -> dict:
        return {"class": self.cls}


@dataclass(frozen=True, eq=False)
class AffineEq:
    objective: str
    W: np.ndarray
    v: np.ndarray
    tol: float = AFFINE_TOL

    def deviation(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return np.atleast_2d(Y) - (np.atleast_2d(X) @ self.W.T + self.v)

    def holds(self, X: np.ndarray, Y: np.ndarray) -> np.ndarray:
        return np.all(np.abs(self.deviation(X, Y)) <= self.tol, axis=1)

    def violation_rows(self, W: np.ndarray, v: np.ndarray) -> list[Constraints]:
        n = W.shape[1]
        dW, dv = W - self.W, v - self.v
        out = []
        for q in range(len(dv)):
            out.append(Constraints.of([(-dW[q], dv[q] - self.tol, True)], n))   # dev > tol
            out.append(Constraints.of([(dW[q], -self.tol - dv[q], True)], n))   # dev < -tol
        return out

    def to_json(self) -> dict:
        return {"affine": {"W": self.W, "v": self.v, "tol": self.tol}}


OutputCondition = ClassIs | AffineEq


# properties -------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class StructProperty:
    structure: Structure
    objective: str
    inps: Constraints
    out: OutputCondition
    support: int
    verified: bool
    mode: str = "iso"

    def to_json(self) -> dict:
        return {
            "structure": self.structure.to_json(),
            "objective": self.objective,
            "mode": self.mode,
            "inps": predicate_to_json(self.inps),
            "out": self.out.to_json(),
            "verified": self.verified,
            "support": self.support,
        }


def predicate_to_json(p: Constraints) -> list[dict]:
    return [{"c": p.C[k], "d": float(p.d[k]), "strict": bool(p.strict[k])} for k in range(len(p))]


def predicate_from_json(rows: list[dict], n: int) -> Constraints:
    return Constraints.of([(np.asarray(r["c"], dtype=float), float(r["d"]), bool(r["strict"])) for r in rows], n)


def output_from_json(obj: dict, objective: str, width: int) -> OutputCondition:
    if "class" in obj:
        return ClassIs(objective, int(obj["class"]), width)
    a = obj["affine"]
    return AffineEq(objective, np.asarray(a["W"], dtype=float).reshape(width, -1), np.asarray(a["v"], dtype=float), float(a["tol"]))


# traces -----------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class TraceSet:
    X: np.ndarray
    Y: np.ndarray
    traces: list[ActivationTrace]

    def __len__(self) -> int:
        return len(self.X)


def collect_traces(lm: LoweredModel, instances: Sequence[tuple[object, Sequence[int]]]) -> TraceSet:
    """Gather features per layout and run the lowered network with tracing."""
    n = lm.layout.input_dim
    if not instances:
        return TraceSet(np.zeros((0, n)), np.zeros((0, lm.fnn.output_dim)), [])
    X = np.stack([lm.layout.gather(g, match) for g, match in instances])
    if X.shape[1] != n:
        raise ValueError("gathered features do not match the layout")
    Y, dec = eval_batch(lm.fnn, X, traced=True)
    return TraceSet(X, Y, traces_from_batch(dec, len(X)))


# verification -----------------------------------------------------------------

class Verdict(Enum):
    PROVED = "proved"
    REFUTED = "refuted"
    UNKNOWN = "unknown"


class _Budget(Exception):
    pass


@dataclass
class _Counter:
    limit: int
    used: int = 0

    def lp(self, cons: Constraints):
        if self.used >= self.limit:
            raise _Budget()
        self.used += 1
        return lp_feasible(cons)


def _row(w: np.ndarray, d: float, strict: bool) -> Constraints:
    return Constraints(w[None, :].copy(), np.array([d]), np.array([strict]))


def _out_violated(out: OutputCondition, x: np.ndarray, y: np.ndarray) -> bool:
    if isinstance(out, ClassIs):
        return not bool(out.holds(y)[0])
    return not bool(out.holds(x[None, :], y[None, :])[0])


def verify(fnn: Fnn, cons: Constraints, out: OutputCondition, witness: np.ndarray,
           budget: int = DEFAULT_LP_BUDGET) -> Verdict:
    """Decide whether every x satisfying `cons` gives an output meeting `out`.

    Complete case split over the activation patterns reachable inside the
    polytope; `witness` must satisfy `cons`.
    """
    counter = _Counter(budget)
    try:
        ok = _explore(fnn, 0, np.eye(fnn.input_dim), np.zeros(fnn.input_dim), cons, witness, out, counter)
    except _Budget:
        return Verdict.UNKNOWN
    except LPIndeterminate:
        return Verdict.UNKNOWN
    return Verdict.PROVED if ok else Verdict.REFUTED


def _explore(fnn, li, W, v, cons, wit, out, counter) -> bool:
    layers = fnn.layers
    while li < len(layers) and isinstance(layers[li], Affine):
        W, v = layers[li].A @ W, layers[li].A @ v + layers[li].b
        li += 1
    if li == len(layers):
        y = W @ wit + v
        if _out_violated(out, wit, y[None, :]):
            return False
        for dis in out.violation_rows(W, v):
            if counter.lp(cons + dis).feasible:
                return False
        return True
    layer = layers[li]
    if isinstance(layer, Relu):
        return _relu_units(fnn, li, W, v, cons, wit, out, counter, 0, np.zeros(layer.width, dtype=bool))
    return _pool_parts(fnn, li, W, v, cons, wit, out, counter, 0, [])


def _relu_units(fnn, li, W, v, cons, wit, out, counter, u, mask) -> bool:
    if u == len(mask):
        return _explore(fnn, li + 1, W * mask[:, None], v * mask, cons, wit, out, counter)
    w, b = W[u], v[u]
    if not w.any():
        mask[u] = b > 0
        return _relu_units(fnn, li, W, v, cons, wit, out, counter, u + 1, mask)
    on_rows = _row(-w, b, True)
    off_rows = _row(w, -b, False)
    wit_on = float(w @ wit + b) > 0
    first, second = (on_rows, off_rows) if wit_on else (off_rows, on_rows)
    m1 = mask.copy()
    m1[u] = wit_on
    if not _relu_units(fnn, li, W, v, cons + first, wit, out, counter, u + 1, m1):
        return False
    res = counter.lp(cons + second)
    if res.feasible:
        m2 = mask.copy()
        m2[u] = not wit_on
        return _relu_units(fnn, li, W, v, cons + second, res.witness, out, counter, u + 1, m2)
    return True


def _pool_parts(fnn, li, W, v, cons, wit, out, counter, pi, winners) -> bool:
    layer = fnn.layers[li]
    if pi == len(layer.partitions):
        keep = winners + list(layer.passthrough)
        return _explore(fnn, li + 1, W[keep], v[keep], cons, wit, out, counter)
    part = layer.partitions[pi]
    vals = W[list(part)] @ wit + v[list(part)]
    wpos = int(np.argmax(vals))

    def rows_for(k: int) -> Constraints:
        w = part[k]
        rows = [(W[i] - W[w], v[w] - v[i], q < k) for q, i in enumerate(part) if q != k]
        return Constraints.of(rows, W.shape[1])

    if not _pool_parts(fnn, li, W, v, cons + rows_for(wpos), wit, out, counter, pi + 1, winners + [part[wpos]]):
        return False
    for k in range(len(part)):
        if k == wpos:
            continue
        extra = rows_for(k)
        res = counter.lp(cons + extra)
        if res.feasible:
            if not _pool_parts(fnn, li, W, v, cons + extra, res.witness, out, counter, pi + 1, winners + [part[k]]):
                return False
    return True


# grouping and relaxation ---------------------------------------------------------

@dataclass
class InferConfig:
    lp_budget: int = DEFAULT_LP_BUDGET
    relax: bool = True
    min_group_support: int = 1
    max_groups: Optional[int] = None


@dataclass
class Group:
    trace: ActivationTrace
    out: OutputCondition
    members: list[int] = field(default_factory=list)


def group_traces(lm: LoweredModel, ts: TraceSet, objective: str, obj: Objective) -> list[Group]:
    """Partition instances by (activation pattern, output condition)."""
    lo, hi = lm.target_output_slice
    groups: dict[tuple, Group] = {}
    for k, tr in enumerate(ts.traces):
        y = ts.Y[k, lo:hi]
        if obj.kind == "classification":
            cls = int(obj.decide(y[None, :])[0])
            key = (tr.key(), cls)
            if key not in groups:
                groups[key] = Group(tr, ClassIs(objective, cls, obj.width))
        else:
            key = (tr.key(),)
            if key not in groups:
                reg = region_of(lm.fnn, tr)
                groups[key] = Group(tr, AffineEq(objective, reg.W[lo:hi].copy(), reg.v[lo:hi].copy()))
        groups[key].members.append(k)
    out = list(groups.values())
    out.sort(key=lambda g: (-len(g.members), g.members[0]))
    return out


def group_constraints(lm: LoweredModel, g: Group) -> Constraints:
    reg = region_of(lm.fnn, g.trace)
    cons = Constraints(reg.C, reg.d, reg.strict)
    if isinstance(g.out, ClassIs):
        lo, hi = lm.target_output_slice
        cons = cons + g.out.decision_rows(reg.W[lo:hi], reg.v[lo:hi])
    return cons


def _initial_check(lm: LoweredModel, g: Group, cons: Constraints) -> bool:
    reg = region_of(lm.fnn, g.trace)
    lo, hi = lm.target_output_slice
    for dis in g.out.violation_rows(reg.W[lo:hi], reg.v[lo:hi]):
        if lp_feasible(cons + dis).feasible:
            return False
    return True


def _objective_fnn(lm: LoweredModel) -> Fnn:
    lo, hi = lm.target_output_slice
    if (lo, hi) == (0, lm.fnn.output_dim):
        return lm.fnn
    last = lm.fnn.layers[-1]
    return Fnn(lm.fnn.layers[:-1] + (Affine(last.A[lo:hi], last.b[lo:hi]),))


def relax_constraints(fnn: Fnn, cons: Constraints, out: OutputCondition, X: np.ndarray,
                      budget: int = DEFAULT_LP_BUDGET) -> Constraints:
    """Greedy constraint dropping that keeps `cons => out` proven."""
    support = cons.satisfied(X).sum(axis=0) if len(X) else np.zeros(len(cons), int)
    order = sorted(range(len(cons)), key=lambda k: (int(support[k]), k))
    keep = np.ones(len(cons), dtype=bool)
    for k in order:
        trial = keep.copy()
        trial[k] = False
        rest = cons.subset(np.flatnonzero(trial))
        flipped = rest + cons.negated_row(k)
        try:
            res = lp_feasible(flipped)
        except LPIndeterminate:
            continue
        if not res.feasible:
            keep = trial
            continue
        if verify(fnn, flipped, out, res.witness, budget) is Verdict.PROVED:
            keep = trial
    return cons.subset(np.flatnonzero(keep))


def infer_properties(lm: LoweredModel, ts: TraceSet, objective: str, obj: Objective,
                     cfg: InferConfig | None = None) -> list[StructProperty]:
    """Verified structure-specific properties for one objective."""
    cfg = cfg or InferConfig()
    if len(ts) == 0:
        raise ValueError("no traces")
    fnn = _objective_fnn(lm)
    props = []
    groups = [g for g in group_traces(lm, ts, objective, obj) if len(g.members) >= cfg.min_group_support]
    if cfg.max_groups is not None:
        groups = groups[: cfg.max_groups]
    for g in groups:
        cons = group_constraints(lm, g)
        try:
            verified = _initial_check(lm, g, cons)
        except LPIndeterminate:
            verified = False
        if verified and cfg.relax:
            cons = relax_constraints(fnn, cons, g.out, ts.X, cfg.lp_budget)
        props.append(StructProperty(lm.layout.structure, objective, cons, g.out, len(g.members), verified))
    return props


# binary simplification --------------------------------------------------------------

def binary_literals(p: Constraints, n_vars: int, max_vars: int = 16) -> Optional[dict[int, int]]:
    """If the {0,1}^n points satisfying `p` form a sub-cube, its fixed literals.

    Returns None when the satisfying set is empty or not a cube.
    """
    if n_vars > max_vars:
        raise ValueError("too many variables to enumerate")
    pts = np.array(list(itertools.product((0.0, 1.0), repeat=n_vars))).reshape(-1, n_vars)
    sat = pts[p.holds(pts)] if len(p) else pts
    if len(sat) == 0:
        return None
    fixed = {j: int(sat[0, j]) for j in range(n_vars) if np.all(sat[:, j] == sat[0, j])}
    if len(sat) != 2 ** (n_vars - len(fixed)):
        return None
    return fixed
