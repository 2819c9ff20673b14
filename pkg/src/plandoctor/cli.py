"""Command-line entry point: generate, train, evaluate, oracle, inspect-plan.

Failures print one JSON line ``{"error": ..., "message": ...}`` on stderr
and exit 1; usage errors exit 2.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from plandoctor import aam as aam_mod
from plandoctor import agent as agent_mod
from plandoctor.actions import action_table, apply, decode, legal_mask
from plandoctor.catalog import Workload, build_workload, dump_json, load_json
from plandoctor.config import RunConfig, load_config
from plandoctor.executor import ExecutionBuffer, true_latency
from plandoctor.expert import complete, optimize
from plandoctor.metrics import reachable_optimum, step_histogram, wrl
from plandoctor.plan import extract_icp, featurize
from plandoctor.simloop import Learner

log = logging.getLogger("plandoctor")

METRICS_FORMAT = "plandoctor.metrics"
ORACLE_FORMAT = "plandoctor.oracle"


class UsageError(Exception):
    pass


def _workload(cfg: RunConfig) -> Workload:
    return build_workload(cfg.schema_seed_, cfg.workload_seed_, cfg.n_tables, (cfg.row_min, cfg.row_max),
                          cfg.n_queries, (cfg.tables_min, cfg.tables_max), cfg.sigma_est,
                          cfg.heldout_fraction)


def _load_workload(args, cfg: RunConfig, out: Path) -> Workload:
    path = Path(args.workload) if getattr(args, "workload", None) else out / "workload.json"
    if path.exists():
        return Workload.from_dict(load_json(path))
    if getattr(args, "workload", None):
        raise FileNotFoundError(f"workload file {path} not found")
    log.info("no %s; generating from config", path)
    return _workload(cfg)


def _learner(cfg: RunConfig, wl: Workload, **kw) -> Learner:
    return Learner(wl, cost_model=cfg.cost_model(), spec=cfg.discretization(), reward_cfg=cfg.reward(),
                   aam_cfg=cfg.aam(), learner_cfg=cfg.learner(), loop_cfg=cfg.loop(), **kw)


def cmd_generate(args, cfg: RunConfig, out: Path) -> dict:
    wl = _workload(cfg)
    out.mkdir(parents=True, exist_ok=True)
    dump_json(wl.schema.to_dict(), out / "schema.json")
    dump_json(wl.to_dict(), out / "workload.json")
    return {"schema": str(out / "schema.json"), "workload": str(out / "workload.json"),
            "queries": len(wl.queries), "train": len(wl.train_ids), "test": len(wl.test_ids)}


def cmd_train(args, cfg: RunConfig, out: Path) -> dict:
    wl = _load_workload(args, cfg, out)
    out.mkdir(parents=True, exist_ok=True)
    if not (out / "workload.json").exists():
        dump_json(wl.to_dict(), out / "workload.json")
    learner = _learner(cfg, wl, out_dir=out)
    reps = learner.run()
    last = reps[-1]
    return {"iterations": len(reps), "train_wrl": last.train_wrl, "test_wrl": last.test_wrl,
            "known_best_wrl": last.known_best_wrl, "report": str(out / "train_report.json")}


def _per_query(sels) -> list[dict]:
    return [{"query_id": s.query_id, "learned_latency": s.latency, "expert_latency": s.expert_latency,
             "step": s.step, "icp": s.icp.to_dict()} for s in sels]


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> dict:
    wl = _load_workload(args, cfg, out)
    ckpt = Path(args.checkpoint) if args.checkpoint else out
    learner = _learner(cfg, wl, buffer=ExecutionBuffer())
    agent_p, aam_p = ckpt / "agent.params.json", ckpt / "aam.params.json"
    trained = agent_p.exists() and aam_p.exists()
    if trained:
        learner.policy = agent_mod.load_params(agent_p)
        learner.aam = aam_mod.load_params(aam_p)
    else:
        log.warning("no parameters under %s; evaluating untrained models", ckpt)
    ex = out / "executions.jsonl"
    if ex.exists():
        learner.buffer = ExecutionBuffer.replay(ex)
    learner.absorb_buffer()

    doc = {"format": METRICS_FORMAT, "version": 1, "trained": trained}
    for name, qs in (("test", wl.test), ("train", wl.train)):
        w, g, sels = learner.evaluate(qs)
        doc[name] = {"wrl": w, "gmrl": g, "queries": _per_query(sels)}
    table = learner.known_best_table(wl.train)
    doc["known_best"] = table
    doc["known_best_steps"] = {str(k): v for k, v in step_histogram([r["step"] for r in table]).items()}
    out.mkdir(parents=True, exist_ok=True)
    dump_json(doc, out / "metrics.json")
    return {"metrics": str(out / "metrics.json"), "test_wrl": doc["test"]["wrl"],
            "test_gmrl": doc["test"]["gmrl"], "train_wrl": doc["train"]["wrl"]}


def cmd_oracle(args, cfg: RunConfig, out: Path) -> dict:
    wl = _load_workload(args, cfg, out)
    maxsteps = cfg.maxsteps if args.maxsteps is None else args.maxsteps
    if maxsteps < 0:
        raise UsageError("--maxsteps must be >= 0")
    model = cfg.cost_model()
    rows = []
    for q in wl.queries:
        cp, lat, steps = reachable_optimum(q, maxsteps, model, cfg.oracle_max_states)
        rows.append({"query_id": q.query_id, "split": "train" if q.query_id in wl.train_ids else "test",
                     "expert_latency": true_latency(q, optimize(q, model), model),
                     "optimum_latency": lat, "steps": steps, "icp": extract_icp(cp).to_dict()})
    doc = {"format": ORACLE_FORMAT, "version": 1, "maxsteps": maxsteps, "queries": rows,
           "wrl": wrl([r["optimum_latency"] for r in rows], [r["expert_latency"] for r in rows])}
    out.mkdir(parents=True, exist_ok=True)
    dump_json(doc, out / "oracle.json")
    return {"oracle": str(out / "oracle.json"), "wrl": doc["wrl"]}


def cmd_inspect(args, cfg: RunConfig, out: Path) -> dict:
    wl = _load_workload(args, cfg, out)
    queries = wl.by_id()
    if args.query not in queries:
        raise UsageError(f"unknown query id {args.query!r}")
    q = queries[args.query]
    model = cfg.cost_model()
    icp = extract_icp(optimize(q, model))
    prev = None
    applied = []
    for a in args.actions:
        icp = apply(icp, a, q, prev)
        prev = decode(a, q.n_schema_tables)
        applied.append(str(prev))
    cp = complete(q, icp, model)
    t = min(len(args.actions), cfg.maxsteps)
    feats = featurize(q, cp, t, cfg.maxsteps)
    legal = legal_mask(icp, q, prev)
    table = action_table(q.n_schema_tables)
    print(f"query {q.query_id}: tables {list(q.tables)}")
    print(f"actions: {', '.join(applied) or '(none)'}")
    print(f"icp: {icp.render()}")
    print("complete plan:")
    n = len(cp.order)
    for i, tbl in enumerate(cp.order):
        print(f"  T{i + 1} t{tbl:<3d} rows {cp.node_rows[i]:>12.6g} cost {cp.node_costs[i]:>12.6g}")
    for k in range(1, n):
        node = n + k - 1
        print(f"  O{k} {cp.methods[k - 1].short:<4s} rows {cp.node_rows[node]:>12.6g} "
              f"cost {cp.node_costs[node]:>12.6g}")
    print(f"estimated cost {cp.total_cost:.6g}  latency {true_latency(q, icp, model):.6g}")
    print("features (op | log_rows | height | structure):")
    for i in range(feats.n_nodes):
        print(f"  {i:2d} {feats.op[i].astype(int).tolist()} {feats.log_rows[i]:6.2f} "
              f"{int(feats.height[i])} {int(feats.structure[i])}")
    print("legal next actions: " + ", ".join(f"{i + 1}:{table[i]}" for i in range(len(table)) if legal[i]))
    return {"query_id": q.query_id, "icp": icp.to_dict()}


COMMANDS = {"generate": cmd_generate, "train": cmd_train, "evaluate": cmd_evaluate,
            "oracle": cmd_oracle, "inspect-plan": cmd_inspect}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key = value config file")
    common.add_argument("--seed", type=int, help="overrides the config seed")
    common.add_argument("--out", help="output directory (overrides out_dir)")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="plandoctor", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("generate", parents=[common], help="write schema.json and workload.json")
    tr = sub.add_parser("train", parents=[common], help="run the global training loop")
    tr.add_argument("--workload", help="workload.json (default: OUT/workload.json, else generated)")
    ev = sub.add_parser("evaluate", parents=[common], help="write metrics.json from saved parameters")
    ev.add_argument("--workload")
    ev.add_argument("--checkpoint", help="directory holding agent/aam params (default: OUT)")
    orc = sub.add_parser("oracle", parents=[common], help="bounded-edit reachable optimum per query")
    orc.add_argument("--workload")
    orc.add_argument("--maxsteps", type=int)
    ins = sub.add_parser("inspect-plan", parents=[common], help="print a plan, its features and legal actions")
    ins.add_argument("--workload")
    ins.add_argument("--query", required=True)
    ins.add_argument("actions", nargs="*", type=int, help="action ids applied to the expert plan")
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)  # exits 2 on bad usage
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    torch.set_num_threads(1)
    try:
        cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
        result = COMMANDS[args.command](args, cfg, Path(cfg.out_dir))
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(json.dumps({"error": "usage", "message": str(exc)}), file=sys.stderr)
        return 2
    except Exception as exc:
        log.debug("failure", exc_info=True)
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    print(json.dumps({"ok": args.command, **result}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
