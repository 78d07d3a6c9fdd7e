"""End-to-end property inference: mine, lower, infer, relax, generalize."""
from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

from . import jsonio
from .dynamic import DynamicConfig, DynProperty, Instances, LikelyProperty, dynamic_analysis, relax
from .generators import rng_for
from .gnn import Gnn
from .graph import Dataset
from .inference import InferConfig, StructProperty, collect_traces, infer_properties, predicate_to_json
from .lowering import lower
from .matching import DEFAULT_CAP, Structure
from .mining import (DEFAULT_MAX_NODES, DEFAULT_MIN_SUPPORT, DEFAULT_THRESHOLD, DEFAULT_TOP_K, Mined,
                     influence_structure, mine_frequent)


class StageError(RuntimeError):
    """A pipeline stage failed; `stage` names it."""

    def __init__(self, stage: str, msg: str) -> None:
        super().__init__(f"{stage}: {msg}")
        self.stage = stage


@dataclass
class PipelineConfig:
    threshold: float = DEFAULT_THRESHOLD
    min_support: float = DEFAULT_MIN_SUPPORT
    top_k: int = DEFAULT_TOP_K
    max_structure_nodes: int = DEFAULT_MAX_NODES
    match_cap: int = DEFAULT_CAP
    seed: int = 0
    mine_samples: Optional[int] = 500      # target nodes sampled for influence extraction
    objectives: Optional[list[str]] = None
    structures: Optional[list[dict]] = None  # skip mining and use these
    lp_budget: int = 400
    min_group_support: int = 1
    max_groups: Optional[int] = None
    tree_depth: int = 4
    tree_min_leaf: int = 5
    jobs: int = 1

    def validate(self) -> None:
        if not 0 < self.threshold <= 1:
            raise ValueError("threshold must be in (0, 1]")
        if not 0 < self.min_support <= 1:
            raise ValueError("min_support must be in (0, 1]")
        for name in ("top_k", "max_structure_nodes", "match_cap", "lp_budget", "jobs", "tree_depth", "tree_min_leaf"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        if self.mine_samples is not None and self.mine_samples < 1:
            raise ValueError("mine_samples must be positive")


@dataclass
class InferenceResult:
    config: PipelineConfig
    mined: list[Mined]
    struct_props: list[StructProperty]
    dyn_props: list[DynProperty]
    truncated: dict[tuple, bool] = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "config": asdict(self.config),
            "structures": [{"structure": m.structure.to_json(), "support": m.support} for m in self.mined],
            "properties": [p.to_json() for p in self.struct_props],
            "likely_properties": [p.to_json() for p in self.dyn_props],
            "summary": summary_rows(self.dyn_props),
        }


def mining_targets(d: Dataset, samples: Optional[int], seed: int) -> list[tuple[int, int]]:
    allt = [(gi, v) for gi, g in enumerate(d.graphs) for v in range(g.node_count)]
    if samples is None or samples >= len(allt):
        return allt
    pick = rng_for(seed, 11).choice(len(allt), size=samples, replace=False)
    return [allt[k] for k in sorted(pick.tolist())]


def _influence_chunk(args) -> list[Structure]:
    m, d, targets, thr, objs = args
    return [influence_structure(m, d.graphs[gi], v, thr, objs) for gi, v in targets]


def _chunks(seq: list, k: int) -> list[list]:
    step = max(1, -(-len(seq) // k))
    return [seq[i:i + step] for i in range(0, len(seq), step)]


def extract_structures(m: Gnn, d: Dataset, cfg: PipelineConfig) -> list[Structure]:
    targets = mining_targets(d, cfg.mine_samples, cfg.seed)
    if cfg.jobs > 1 and len(targets) > 1:
        jobs = [(m, d, c, cfg.threshold, cfg.objectives) for c in _chunks(targets, cfg.jobs)]
        with ProcessPoolExecutor(cfg.jobs) as ex:
            return [s for part in ex.map(_influence_chunk, jobs) for s in part]
    return _influence_chunk((m, d, targets, cfg.threshold, cfg.objectives))


def _structure_props(m: Gnn, d: Dataset, s: Structure, cfg: PipelineConfig):
    inst = Instances(m, d, cfg.match_cap)
    entry = inst.of(s)
    icfg = InferConfig(cfg.lp_budget, True, cfg.min_group_support, cfg.max_groups)
    dcfg = DynamicConfig(cfg.tree_depth, cfg.tree_min_leaf)
    names = cfg.objectives if cfg.objectives is not None else sorted(m.objectives)
    sprops: list[StructProperty] = []
    dprops: list[DynProperty] = []
    if not entry["maps"]:
        return sprops, dprops, entry["truncated"]
    instances = [(d.graphs[gi], mt) for gi, mt in zip(entry["gids"], entry["maps"])]
    for name in names:
        o = m.objectives[name]
        lm = lower(m, s, (o.lo, o.hi))
        ts = collect_traces(lm, instances)
        props = infer_properties(lm, ts, name, o, icfg)
        sprops.extend(props)
        for lp in merge_duplicates([relax(p) for p in props if p.verified]):
            dprops.append(dynamic_analysis(lp, m, inst, dcfg))
    return sprops, dprops, entry["truncated"]


def merge_duplicates(props: list[LikelyProperty]) -> list[LikelyProperty]:
    """Relaxation can turn different groups into the same statement; keep one, summing support."""
    order: list[str] = []
    seen: dict[str, LikelyProperty] = {}
    for p in props:
        key = jsonio.dumps([p.objective, predicate_to_json(p.inps), p.out.to_json()])
        if key in seen:
            q = seen[key]
            seen[key] = dataclasses.replace(q, support=q.support + p.support)
        else:
            order.append(key)
            seen[key] = p
    return [seen[k] for k in order]


def _structure_job(args):
    return _structure_props(*args)


def run_inference(m: Gnn, d: Dataset, cfg: PipelineConfig | None = None) -> InferenceResult:
    cfg = cfg or PipelineConfig()
    try:
        cfg.validate()
        if cfg.objectives is not None:
            for n in cfg.objectives:
                if n not in m.objectives:
                    raise ValueError(f"unknown objective '{n}'")
        if tuple(d.feature_dims) != (m.node_dim, m.edge_dim):
            raise ValueError(f"dataset feature dims {d.feature_dims} do not fit model ({m.node_dim}, {m.edge_dim})")
    except ValueError as exc:
        raise StageError("config", str(exc)) from exc
    if not d.graphs or all(g.node_count == 0 for g in d.graphs):
        raise StageError("mining", "dataset has no nodes")

    if cfg.structures is not None:
        mined = [Mined(Structure.from_json(s), 0, ()) for s in cfg.structures]
    else:
        try:
            found = extract_structures(m, d, cfg)
            mined = mine_frequent(found, cfg.min_support, cfg.max_structure_nodes, cfg.top_k)
        except ValueError as exc:
            raise StageError("mining", str(exc)) from exc

    try:
        jobs = [(m, d, mi.structure, cfg) for mi in mined]
        if cfg.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(min(cfg.jobs, len(jobs))) as ex:
                outs = list(ex.map(_structure_job, jobs))
        else:
            outs = [_structure_job(j) for j in jobs]
    except ValueError as exc:
        raise StageError("inference", str(exc)) from exc

    sprops, dprops, trunc = [], [], {}
    for mi, (sp, dp, tr) in zip(mined, outs):
        sprops.extend(sp)
        dprops.extend(dp)
        trunc[mi.structure.key] = tr
    return InferenceResult(cfg, mined, sprops, dprops, trunc)


def summary_rows(props: Sequence[DynProperty]) -> list[dict]:
    rows = []
    for k, p in enumerate(props):
        c = p.confidence
        row = {"id": k, "nodes": p.structure.node_count, "edges": len(p.structure.edges),
               "objective": p.objective, "support": p.base.support}
        if c is not None:
            row.update(c.to_json())
        rows.append(row)
    return rows


def _fmt(v) -> str:
    if v is None:
        return "-"
    if isinstance(v, bool):
        return "yes" if v else "no"
    if isinstance(v, float):
        return f"{v:.4g}"
    return str(v)


def format_table(rows: Sequence[dict], cols: Sequence[str]) -> str:
    """Aligned plain-text table."""
    cells = [[c for c in cols]] + [[_fmt(r.get(c)) for c in cols] for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(cols))]
    lines = ["  ".join(v.rjust(w) for v, w in zip(row, widths)) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_report(res: InferenceResult) -> str:
    rows = summary_rows(res.dyn_props)
    out = ["config: " + ", ".join(f"{k}={v}" for k, v in asdict(res.config).items() if k not in ("structures", "jobs")), ""]
    out.append("mined structures:")
    for mi in res.mined:
        out.append(f"  n={mi.structure.node_count} edges={list(mi.structure.edges)} target={mi.structure.target} "
                   f"support={mi.support}")
    n_ver = sum(p.verified for p in res.struct_props)
    out.append("")
    out.append(f"structure-specific properties: {len(res.struct_props)} ({n_ver} verified)")
    out.append("")
    cols = ["id", "nodes", "edges", "objective", "support", "support_prior", "support_full",
            "pa_prior", "pa_full", "ir", "pe_prior", "pe_full", "rr"]
    out.append(format_table(rows, cols))
    return "\n".join(out) + "\n"
