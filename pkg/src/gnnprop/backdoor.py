"""Backdoor-property detection and property-guided edge pruning."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .dynamic import DynProperty, Instances, input_mask
from .gnn import Gnn, gnn_layer, predict
from .graph import Dataset
from .inference import ClassIs
from .matching import DEFAULT_CAP

UNNOTICEABLE = 0.1
TAU_S = 0.05
OVERRIDE_RATE = 0.8
COSINE_MIN = 0.1


@dataclass
class SupportStats:
    n_input_train: int
    n_struct_train: int
    n_input_test: int
    n_struct_test: int
    unnoticeable_bound: float = UNNOTICEABLE
    tau_s: float = TAU_S
    mean_or: Optional[float] = None
    n_defined_or: int = 0
    backdoor: bool = False

    @staticmethod
    def _spr(a: int, b: int) -> float:
        return a / b if b else 0.0

    @property
    def spr_train(self) -> float:
        return self._spr(self.n_input_train, self.n_struct_train)

    @property
    def spr_test(self) -> float:
        return self._spr(self.n_input_test, self.n_struct_test)

    @property
    def zero_train(self) -> bool:
        return self.n_input_train == 0

    @property
    def unnoticeable(self) -> bool:
        return not self.zero_train and self.spr_train <= self.unnoticeable_bound

    @property
    def stealthy(self) -> bool:
        if self.zero_train:
            return False
        return self.spr_test / self.spr_train < self.tau_s

    @property
    def likely_backdoor(self) -> bool:
        return self.unnoticeable and self.stealthy

    def to_json(self) -> dict:
        return {
            "train": {"input": self.n_input_train, "structure": self.n_struct_train, "spr": self.spr_train},
            "test": {"input": self.n_input_test, "structure": self.n_struct_test, "spr": self.spr_test},
            "zero_train_support": self.zero_train,
            "unnoticeable": self.unnoticeable,
            "stealthy": self.stealthy,
            "mean_overriding_rate": self.mean_or,
            "defined_overriding_rates": self.n_defined_or,
            "backdoor": self.backdoor,
        }


def _inst(m: Gnn, d: Dataset | Instances, cap: int) -> Instances:
    return d if isinstance(d, Instances) else Instances(m, d, cap)


def support_stats(p: DynProperty, train: Dataset | Instances, test: Dataset | Instances, m: Gnn,
                  unnoticeable: float = UNNOTICEABLE, tau_s: float = TAU_S, cap: int = DEFAULT_CAP) -> SupportStats:
    tr, te = _inst(m, train, cap), _inst(m, test, cap)
    mtr, mte = input_mask(p, tr), input_mask(p, te)
    return SupportStats(int(mtr.sum()), len(mtr), int(mte.sum()), len(mte), unnoticeable, tau_s)


def _units(p: DynProperty, inst: Instances) -> set[tuple[int, int]]:
    """Host target nodes (graph, node) with at least one match satisfying p's input condition."""
    mask = input_mask(p, inst)
    e = inst.of(p.structure)
    hosts = inst.hosts(p.structure)
    return {(int(e["gids"][k]), int(hosts[k])) for k in np.flatnonzero(mask)}


def overriding_rate(p_likely: DynProperty, p_benign: DynProperty, train: Dataset | Instances, m: Gnn,
                    cap: int = DEFAULT_CAP) -> Optional[float]:
    """Share of shared-support nodes where the likely property's output wins; None when undefined."""
    if p_likely.objective != p_benign.objective:
        raise ValueError("properties concern different objectives")
    ol, ob = p_likely.base.out, p_benign.base.out
    if not (isinstance(ol, ClassIs) and isinstance(ob, ClassIs)):
        return None
    inst = _inst(m, train, cap)
    shared = sorted(_units(p_likely, inst) & _units(p_benign, inst))
    if not shared:
        return None
    o = m.objectives[p_likely.objective]
    hit = 0
    for gi, v in shared:
        cls = int(o.decide(inst.forward(gi)[v:v + 1, o.lo:o.hi])[0])
        if cls == ol.cls and (ol.cls == ob.cls or cls != ob.cls):
            hit += 1
    return hit / len(shared)


@dataclass
class BackdoorClassification:
    backdoor: list[int]
    likely: list[int]          # likely-backdoor without promotion
    benign: list[int]
    stats: list[SupportStats]

    def to_json(self) -> dict:
        return {"backdoor": self.backdoor, "likely_unpromoted": self.likely, "benign": self.benign,
                "stats": [s.to_json() for s in self.stats]}


def classify_backdoor(props: Sequence[DynProperty], train: Dataset, test: Dataset, m: Gnn,
                      unnoticeable: float = UNNOTICEABLE, tau_s: float = TAU_S,
                      override: float = OVERRIDE_RATE, cap: int = DEFAULT_CAP) -> BackdoorClassification:
    """Split properties into backdoor / unpromoted likely-backdoor / benign (indices into props)."""
    if not props:
        raise ValueError("no properties to classify")
    tr, te = Instances(m, train, cap), Instances(m, test, cap)
    stats = [support_stats(p, tr, te, m, unnoticeable, tau_s) for p in props]
    benign = [k for k, s in enumerate(stats) if not s.likely_backdoor]
    backdoor, likely = [], []
    for k, s in enumerate(stats):
        if not s.likely_backdoor:
            continue
        rates = [overriding_rate(props[k], props[b], tr, m) for b in benign
                 if props[b].objective == props[k].objective]
        rates = [r for r in rates if r is not None]
        s.n_defined_or = len(rates)
        if rates:
            s.mean_or = float(np.mean(rates))
        if rates and s.mean_or >= override:
            s.backdoor = True
            backdoor.append(k)
        else:
            likely.append(k)
    return BackdoorClassification(backdoor, likely, benign, stats)


# pruning ------------------------------------------------------------------------------

def matched_edges(props: Sequence[DynProperty], m: Gnn, d: Dataset | Instances,
                  cap: int = DEFAULT_CAP) -> tuple[list[set[int]], list[set[int]]]:
    """Per graph: edge rows and node ids covered by input-satisfying matches."""
    inst = _inst(m, d, cap)
    n = len(inst.d.graphs)
    edges: list[set[int]] = [set() for _ in range(n)]
    nodes: list[set[int]] = [set() for _ in range(n)]
    for p in props:
        s = p.structure
        e = inst.of(s)
        for k in np.flatnonzero(input_mask(p, inst)):
            gi, mt = int(e["gids"][k]), e["maps"][k]
            idx = inst.d.graphs[gi].edge_index
            edges[gi].update(idx[(mt[a], mt[b], t)] for a, b, t in s.edges)
            nodes[gi].update(mt)
    return edges, nodes


def prune_dataset(props: Sequence[DynProperty], m: Gnn, d: Dataset, cap: int = DEFAULT_CAP):
    """Dataset with matched structure edges removed, plus removed-edge count and masked nodes."""
    edges, nodes = matched_edges(props, m, d, cap) if props else ([set()] * len(d.graphs), [set()] * len(d.graphs))
    graphs = tuple(g.with_edges_removed(sorted(r)) if r else g for g, r in zip(d.graphs, edges))
    return Dataset(graphs, d.feature_dims, d.objectives), sum(len(r) for r in edges), nodes


def prune_by_similarity(m: Gnn, d: Dataset, min_cos: float = COSINE_MIN) -> tuple[Dataset, int]:
    """Baseline: drop edges whose endpoints' first-layer embeddings have cosine below min_cos."""
    graphs, removed = [], 0
    for g in d.graphs:
        if not g.edge_count:
            graphs.append(g)
            continue
        h = gnn_layer(m.layers[0], np.asarray(g.x, dtype=float), g)
        a, b = h[g.edges[:, 0]], h[g.edges[:, 1]]
        den = np.linalg.norm(a, axis=1) * np.linalg.norm(b, axis=1)
        cos = np.where(den > 0, (a * b).sum(axis=1) / np.where(den > 0, den, 1.0), 0.0)
        rows = np.flatnonzero(cos < min_cos)
        removed += len(rows)
        graphs.append(g.with_edges_removed(rows.tolist()) if len(rows) else g)
    return Dataset(tuple(graphs), d.feature_dims, d.objectives), removed


@dataclass
class DefenseReport:
    acc: float
    asr: float
    d_acc: float
    d_asr: float
    pruned_edge_count: int
    n_acc: int = 0
    n_asr: int = 0
    d_n_acc: int = 0
    d_n_asr: int = 0

    def to_json(self) -> dict:
        def f(v: float):
            return None if not np.isfinite(v) else float(v)
        return {"acc": f(self.acc), "asr": f(self.asr), "d_acc": f(self.d_acc), "d_asr": f(self.d_asr),
                "pruned_edge_count": self.pruned_edge_count,
                "counts": {"acc": self.n_acc, "asr": self.n_asr, "d_acc": self.d_n_acc, "d_asr": self.d_n_asr}}


@dataclass
class EvalSpec:
    target_class: int = 1
    label: str = "label"
    role: str = "role"
    victim_role: int = 1


def _rate(m: Gnn, d: Dataset, spec: EvalSpec, kind: str, masked: Optional[list[set[int]]] = None) -> tuple[float, int]:
    hit = tot = 0
    for gi, g in enumerate(d.graphs):
        pred = predict(m, g, spec.label)
        lab = g.labels[spec.label]
        role = g.labels.get(spec.role, np.zeros(g.node_count, dtype=np.int64))
        if kind == "acc":
            sel = role == 0
        else:
            sel = (role == spec.victim_role) & (lab != spec.target_class)
        if masked is not None and masked[gi]:
            keep = np.ones(g.node_count, dtype=bool)
            keep[sorted(masked[gi])] = False
            sel &= keep
        idx = np.flatnonzero(sel)
        tot += len(idx)
        hit += int((pred[idx] == lab[idx]).sum()) if kind == "acc" else int((pred[idx] == spec.target_class).sum())
    return (hit / tot if tot else float("nan")), tot


def prune_and_evaluate(m: Gnn, backdoor_props: Sequence[DynProperty], clean_test: Dataset,
                       triggered_test: Dataset, spec: EvalSpec | None = None, label_deletion: bool = False,
                       cap: int = DEFAULT_CAP) -> DefenseReport:
    """Accuracy and attack success before and after pruning matched backdoor structures."""
    spec = spec or EvalSpec()
    acc, n_acc = _rate(m, clean_test, spec, "acc")
    asr, n_asr = _rate(m, triggered_test, spec, "asr")
    pc, rc, nc = prune_dataset(backdoor_props, m, clean_test, cap)
    pt, rt, nt = prune_dataset(backdoor_props, m, triggered_test, cap)
    d_acc, dn_acc = _rate(m, pc, spec, "acc", nc if label_deletion else None)
    d_asr, dn_asr = _rate(m, pt, spec, "asr", nt if label_deletion else None)
    return DefenseReport(acc, asr, d_acc, d_asr, rc + rt, n_acc, n_asr, dn_acc, dn_asr)


def similarity_baseline(m: Gnn, clean_test: Dataset, triggered_test: Dataset, spec: EvalSpec | None = None,
                        min_cos: float = COSINE_MIN) -> DefenseReport:
    spec = spec or EvalSpec()
    acc, n_acc = _rate(m, clean_test, spec, "acc")
    asr, n_asr = _rate(m, triggered_test, spec, "asr")
    pc, rc = prune_by_similarity(m, clean_test, min_cos)
    pt, rt = prune_by_similarity(m, triggered_test, min_cos)
    d_acc, dn_acc = _rate(m, pc, spec, "acc")
    d_asr, dn_asr = _rate(m, pt, spec, "asr")
    return DefenseReport(acc, asr, d_acc, d_asr, rc + rt, n_acc, n_asr, dn_acc, dn_asr)


def defense_table(m: Gnn, backdoor_props: Sequence[DynProperty], clean_test: Dataset, triggered_test: Dataset,
                  spec: EvalSpec | None = None, cap: int = DEFAULT_CAP) -> list[dict]:
    """Rows comparing the similarity baseline (with and without label masking) and property pruning."""
    rows = []
    base = similarity_baseline(m, clean_test, triggered_test, spec)
    rows.append({"method": "prune-cosine", **base.to_json()})
    # label masking for the baseline: nodes touching a pruned edge
    rows.append({"method": "prune-cosine+ld", **_cosine_ld(m, clean_test, triggered_test, spec or EvalSpec())})
    if backdoor_props:
        rows.append({"method": "property", **prune_and_evaluate(m, backdoor_props, clean_test, triggered_test, spec,
                                                                False, cap).to_json()})
        rows.append({"method": "property+ld", **prune_and_evaluate(m, backdoor_props, clean_test, triggered_test,
                                                                   spec, True, cap).to_json()})
    return rows


def _cosine_ld(m: Gnn, clean: Dataset, trig: Dataset, spec: EvalSpec) -> dict:
    def masked(d: Dataset):
        pd, removed = prune_by_similarity(m, d)
        nodes = []
        for g, h in zip(d.graphs, pd.graphs):
            gone = set(map(tuple, g.edges.tolist())) - set(map(tuple, h.edges.tolist()))
            nodes.append({v for s, t, _ in gone for v in (s, t)})
        return pd, removed, nodes
    acc, n_acc = _rate(m, clean, spec, "acc")
    asr, n_asr = _rate(m, trig, spec, "asr")
    pc, rc, nc = masked(clean)
    pt, rt, nt = masked(trig)
    d_acc, dn_acc = _rate(m, pc, spec, "acc", nc)
    d_asr, dn_asr = _rate(m, pt, spec, "asr", nt)
    return DefenseReport(acc, asr, d_acc, d_asr, rc + rt, n_acc, n_asr, dn_acc, dn_asr).to_json()
