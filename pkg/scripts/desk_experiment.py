"""Desk-scale end-to-end experiment: train several seeds plus an exact-estimate control.

For every run this trains through the CLI, computes the bounded-edit oracle,
and prints train WRL, known-best WRL and how much of the oracle's latency
reduction the known-best plans recover.  A summary lands in OUT/summary.json.

    python3 scripts/desk_experiment.py --out runs/desk --seeds 0 1 2
"""
import argparse
import json
import statistics
import sys
import time
from pathlib import Path

from plandoctor.cli import main as cli


def run(root: Path, name: str, seed: int, iterations: int, extra: dict) -> dict:
    out = root / name
    cfg = root / f"{name}.cfg"
    lines = [f"seed = {seed}", f"iterations = {iterations}"] + [f"{k} = {v}" for k, v in extra.items()]
    cfg.write_text("\n".join(lines) + "\n")
    args = ["--config", str(cfg), "--out", str(out)]
    t0 = time.perf_counter()
    for cmd in (["train"], ["oracle"], ["evaluate"]):
        if cli(cmd + args) != 0:
            raise SystemExit(f"{cmd[0]} failed for {name}")
    secs = time.perf_counter() - t0
    report = json.loads((out / "train_report.json").read_text())
    oracle = {r["query_id"]: r for r in json.loads((out / "oracle.json").read_text())["queries"]}
    metrics = json.loads((out / "metrics.json").read_text())
    kb = report["known_best"]
    orig = sum(r["expert_latency"] for r in kb)
    best = sum(r["known_best_latency"] for r in kb)
    reach = sum(oracle[r["query_id"]]["optimum_latency"] for r in kb)
    last = report["iterations"][-1]
    return {"name": name, "seed": seed, "train_wrl": last["train_wrl"], "test_wrl": last["test_wrl"],
            "known_best_wrl": best / orig, "oracle_wrl": reach / orig,
            "recovery": (orig - best) / (orig - reach) if orig > reach else None,
            "known_best_steps": metrics["known_best_steps"], "seconds": secs}


def main(argv=None) -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="runs/desk")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--iterations", type=int, default=5)
    p.add_argument("--no-control", action="store_true", help="skip the sigma_est = 0 run")
    args = p.parse_args(argv)
    root = Path(args.out)
    root.mkdir(parents=True, exist_ok=True)

    rows = [run(root, f"seed{s}", s, args.iterations, {}) for s in args.seeds]
    if not args.no_control:
        rows.append(run(root, "control", args.seeds[0], args.iterations, {"sigma_est": 0.0}))

    print(f"{'run':<9} {'trainWRL':>9} {'testWRL':>8} {'kbWRL':>7} {'oracle':>7} {'recov':>6} {'secs':>6}")
    for r in rows:
        rec = "-" if r["recovery"] is None else f"{r['recovery']:.2f}"
        print(f"{r['name']:<9} {r['train_wrl']:9.3f} {r['test_wrl']:8.3f} {r['known_best_wrl']:7.3f} "
              f"{r['oracle_wrl']:7.3f} {rec:>6} {r['seconds']:6.0f}")
    seeded = [r for r in rows if r["name"] != "control"]
    summary = {"runs": rows, "median_train_wrl": statistics.median(r["train_wrl"] for r in seeded)}
    recs = [r["recovery"] for r in seeded if r["recovery"] is not None]
    if recs:
        summary["median_recovery"] = statistics.median(recs)
    (root / "summary.json").write_text(json.dumps(summary, indent=1))
    print(json.dumps({k: v for k, v in summary.items() if k != "runs"}))
    return 0


if __name__ == "__main__":
    sys.exit(main())
