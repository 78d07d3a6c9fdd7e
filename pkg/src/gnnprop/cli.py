"""Command-line entry point: gen, infer, defend, eval, report."""
from __future__ import annotations

import argparse
import dataclasses
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from . import jsonio
from .backdoor import (OVERRIDE_RATE, TAU_S, UNNOTICEABLE, EvalSpec, classify_backdoor, defense_table,
                       prune_and_evaluate)
from .dynamic import Instances, dyn_property_from_json, evaluate_confidence
from .generators import (TriggerSpec, build_backdoored_classifier, gen_bf_dataset, gen_bfs_dataset,
                         gen_dfs_dataset)
from .gnn import build_bellman_ford_reference, build_bfs_reference, build_dfs_reference, gnn_from_json, gnn_to_json
from .graph import DatasetError, load_dataset, save_dataset
from .pipeline import PipelineConfig, StageError, format_table, render_report, run_inference, summary_rows

EXIT_OK, EXIT_VALIDATION, EXIT_STAGE = 0, 2, 3


class ValidationError(Exception):
    pass


# flags shared with the config file; name -> (type, default)
PIPE_FLAGS = {
    "threshold": (float, 0.8),
    "min_support": (float, 0.1),
    "top_k": (int, 5),
    "max_structure_nodes": (int, 5),
    "match_cap": (int, 100000),
    "seed": (int, 0),
    "jobs": (int, None),
    "mine_samples": (int, 500),
    "lp_budget": (int, 400),
}
DEFEND_FLAGS = {
    "tau_s": (float, TAU_S),
    "unnoticeable": (float, UNNOTICEABLE),
    "override_rate": (float, OVERRIDE_RATE),
    "target_class": (int, 1),
}


def _add_flags(p: argparse.ArgumentParser, table: dict) -> None:
    for name, (typ, _) in table.items():
        p.add_argument("--" + name.replace("_", "-"), dest=name, type=typ, default=None)


def _settings(args: argparse.Namespace, table: dict) -> dict:
    """Defaults, overridden by the config file, overridden by explicit flags."""
    out = {k: d for k, (_, d) in table.items()}
    if getattr(args, "config", None):
        try:
            cfg = jsonio.read(args.config)
        except (OSError, ValueError) as exc:
            raise ValidationError(f"cannot read config: {exc}") from exc
        if not isinstance(cfg, dict):
            raise ValidationError("config must be a JSON object")
        for k, v in cfg.items():
            key = k.replace("-", "_")
            if key in table:
                out[key] = table[key][0](v)
    for k in table:
        v = getattr(args, k, None)
        if v is not None:
            out[k] = v
    if "jobs" in out and out["jobs"] is None:
        out["jobs"] = os.cpu_count() or 1
    return out


def _load_model(path: Optional[str]):
    if not path:
        raise ValidationError("--model is required")
    try:
        return gnn_from_json(jsonio.read(path))
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"cannot load model {path}: {exc}") from exc


def _load_data(path: Optional[str], flag: str = "--data"):
    if not path:
        raise ValidationError(f"{flag} is required")
    try:
        return load_dataset(path)
    except (OSError, DatasetError) as exc:
        raise ValidationError(f"cannot load dataset {path}: {exc}") from exc


def _load_props(path: Optional[str], m):
    if not path:
        raise ValidationError("--properties is required")
    try:
        obj = jsonio.read(path)
        return [dyn_property_from_json(p, m) for p in obj["likely_properties"]]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ValidationError(f"cannot load properties {path}: {exc}") from exc


def _out_dir(args) -> Path:
    if not args.out:
        raise ValidationError("--out is required")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise ValidationError(f"cannot create {out}: {exc}") from exc
    return out


# commands ----------------------------------------------------------------------

def cmd_gen(args) -> int:
    out = _out_dir(args)
    seed = args.seed if args.seed is not None else 0
    if args.task == "backdoor":
        spec = TriggerSpec(poison_rate=args.poison_rate, seed=seed, n_graphs=args.graphs or 8)
        st = build_backdoored_classifier(spec)
        jsonio.write(gnn_to_json(st.model), out / "model.json")
        save_dataset(st.train, out / "train.json")
        save_dataset(st.test_clean, out / "test_clean.json")
        save_dataset(st.test_triggered, out / "test_triggered.json")
        meta = {"task": "backdoor", "seed": seed, "poison_rate": spec.poison_rate,
                "target_class": spec.target_class, "trigger_value": list(spec.trigger_feature_value)}
        jsonio.write(meta, out / "meta.json")
        return EXIT_OK
    builders = {
        "bfs": (build_bfs_reference, gen_bfs_dataset),
        "bf": (build_bellman_ford_reference, gen_bf_dataset),
        "dfs": (build_dfs_reference, gen_dfs_dataset),
    }
    build, gen = builders[args.task]
    n = args.graphs or 40
    jsonio.write(gnn_to_json(build()), out / "model.json")
    save_dataset(gen(seed, n), out / "data.json")
    save_dataset(gen(seed + 1, n), out / "heldout.json")
    jsonio.write({"task": args.task, "seed": seed, "graphs": n}, out / "meta.json")
    return EXIT_OK


def cmd_infer(args) -> int:
    m = _load_model(args.model)
    d = _load_data(args.data)
    out = _out_dir(args)
    st = _settings(args, PIPE_FLAGS)
    cfg = PipelineConfig(**st)
    try:
        res = run_inference(m, d, cfg)
    except StageError as exc:
        if exc.stage == "config":
            raise ValidationError(str(exc)) from exc
        raise
    obj = res.to_json()
    # worker count does not affect results; keep it out of the file so runs compare byte-for-byte
    obj["config"].pop("jobs", None)
    jsonio.write(obj, out / "properties.json")
    (out / "report.txt").write_text(render_report(res), encoding="utf-8")
    return EXIT_OK


def cmd_defend(args) -> int:
    m = _load_model(args.model)
    train = _load_data(args.data)
    clean = _load_data(args.test_clean, "--test-clean")
    trig = _load_data(args.test_triggered, "--test-triggered")
    props = _load_props(args.properties, m)
    out = _out_dir(args)
    st = _settings(args, {**DEFEND_FLAGS, "match_cap": PIPE_FLAGS["match_cap"]})
    spec = EvalSpec(target_class=st["target_class"])
    cls = None
    back = []
    if props:
        cls = classify_backdoor(props, train, clean, m, st["unnoticeable"], st["tau_s"], st["override_rate"],
                                st["match_cap"])
        back = [props[k] for k in cls.backdoor]
    rep = prune_and_evaluate(m, back, clean, trig, spec, cap=st["match_cap"])
    table = defense_table(m, back, clean, trig, spec, st["match_cap"])
    obj = {
        "thresholds": {"unnoticeable": st["unnoticeable"], "tau_s": st["tau_s"], "override_rate": st["override_rate"],
                       "target_class": st["target_class"], "match_cap": st["match_cap"]},
        "classification": None if cls is None else cls.to_json(),
        "report": rep.to_json(),
        "table": table,
    }
    jsonio.write(obj, out / "defense.json")
    (out / "defense.txt").write_text(render_defense(obj), encoding="utf-8")
    return EXIT_OK


def render_defense(obj: dict) -> str:
    th = obj["thresholds"]
    lines = ["thresholds: " + ", ".join(f"{k}={v}" for k, v in th.items())]
    cls = obj["classification"]
    if cls is not None:
        lines.append(f"backdoor properties: {cls['backdoor']}  unpromoted: {cls['likely_unpromoted']}")
    else:
        lines.append("no properties given; baseline rows only")
    lines.append("")
    rows = [{"method": "none", **{k: obj["report"][k] for k in ("acc", "asr")}, "d_acc": obj["report"]["acc"],
             "d_asr": obj["report"]["asr"], "pruned_edge_count": 0}] + obj["table"]
    lines.append(format_table(rows, ["method", "acc", "asr", "d_acc", "d_asr", "pruned_edge_count"]))
    return "\n".join(lines) + "\n"


def cmd_eval(args) -> int:
    m = _load_model(args.model)
    d = _load_data(args.data)
    props = _load_props(args.properties, m)
    out = _out_dir(args)
    st = _settings(args, {"match_cap": PIPE_FLAGS["match_cap"]})
    inst = Instances(m, d, st["match_cap"])
    reps = [evaluate_confidence(p, m, inst) for p in props]
    props = [dataclasses.replace(p, confidence=r) for p, r in zip(props, reps)]
    rows = summary_rows(props)
    jsonio.write({"match_cap": st["match_cap"], "summary": rows}, out / "eval.json")
    cols = ["id", "nodes", "edges", "objective", "support_prior", "support_full", "pa_prior", "pa_full", "ir",
            "pe_prior", "pe_full", "rr"]
    (out / "eval.txt").write_text(format_table(rows, cols) + "\n", encoding="utf-8")
    return EXIT_OK


def cmd_report(args) -> int:
    if not args.input:
        raise ValidationError("--input is required")
    try:
        obj = jsonio.read(args.input)
    except (OSError, ValueError) as exc:
        raise ValidationError(f"cannot read {args.input}: {exc}") from exc
    if "likely_properties" in obj:
        cols = ["id", "nodes", "edges", "objective", "support", "support_prior", "support_full", "pa_prior",
                "pa_full", "ir", "pe_prior", "pe_full", "rr"]
        text = format_table(obj["summary"], cols)
    elif "table" in obj:
        text = render_defense(obj)
    elif "summary" in obj:
        text = format_table(obj["summary"], list(obj["summary"][0]) if obj["summary"] else ["id"])
    else:
        raise ValidationError("unrecognised input file")
    sys.stdout.write(text.rstrip("\n") + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gnnprop", description="Infer and use properties of message-passing GNNs.")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a reference model and datasets")
    g.add_argument("task", choices=["bfs", "dfs", "bf", "backdoor"])
    g.add_argument("--out")
    g.add_argument("--seed", type=int)
    g.add_argument("--graphs", type=int)
    g.add_argument("--poison-rate", dest="poison_rate", type=float, default=0.05)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("infer", help="mine structures and infer properties")
    i.add_argument("--model")
    i.add_argument("--data")
    i.add_argument("--out")
    i.add_argument("--config")
    _add_flags(i, PIPE_FLAGS)
    i.set_defaults(func=cmd_infer)

    d = sub.add_parser("defend", help="detect backdoor properties and prune")
    d.add_argument("--model")
    d.add_argument("--data", help="training dataset")
    d.add_argument("--test-clean", dest="test_clean")
    d.add_argument("--test-triggered", dest="test_triggered")
    d.add_argument("--properties")
    d.add_argument("--out")
    d.add_argument("--config")
    d.add_argument("--seed", type=int)
    d.add_argument("--jobs", type=int)
    _add_flags(d, {**DEFEND_FLAGS, "match_cap": PIPE_FLAGS["match_cap"]})
    d.set_defaults(func=cmd_defend)

    e = sub.add_parser("eval", help="re-evaluate property confidence on a dataset")
    e.add_argument("--model")
    e.add_argument("--data")
    e.add_argument("--properties")
    e.add_argument("--out")
    e.add_argument("--config")
    e.add_argument("--seed", type=int)
    e.add_argument("--jobs", type=int)
    _add_flags(e, {"match_cap": PIPE_FLAGS["match_cap"]})
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("report", help="print a table from an output file")
    r.add_argument("--input")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_VALIDATION
    try:
        return args.func(args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except (ValueError, TypeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except StageError as exc:
        print(f"error in stage {exc}", file=sys.stderr)
        return EXIT_STAGE


if __name__ == "__main__":
    sys.exit(main())
