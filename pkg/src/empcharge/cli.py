"""Command-line front end: offline synthesis, scenario runs, benchmarks,
table export and verification.

Exit codes: 0 success, 2 incomplete charge, 3 synthesis failure,
4 verification failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
import time

import numpy as np

from . import model as mdl
from .control import RunSetup, run_closed_loop
from .mpqp import MpcConfig, build
from .qp import DenseQp, solve_qp
from .regions import (DEFAULT_THETA_BOX, coverage_check, explore,
                      export_table, import_table, locate, rounded,
                      _atomic_write)
from .segments import build_table, default_breakpoints

EXIT_OK = 0
EXIT_INCOMPLETE = 2
EXIT_SYNTHESIS = 3
EXIT_VERIFY = 4


class ConfigError(Exception):
    pass


def _check_keys(doc: dict, allowed: set[str], ctx: str) -> None:
    unknown = set(doc) - allowed
    if unknown:
        raise ConfigError(f"{ctx}: unknown keys {sorted(unknown)}")


def _load_versioned(path, allowed: set[str], ctx: str) -> dict:
    with open(path) as f:
        doc = json.load(f)
    if doc.get("version") != 1:
        raise ConfigError(f"{ctx}: expected version 1, got "
                          f"{doc.get('version')!r}")
    _check_keys(doc, allowed | {"version"}, ctx)
    return doc


_SYNTH_KEYS = {"params", "breakpoints", "gamma1", "gamma2", "dt", "mpc",
               "theta_box", "round_decimals", "coverage_samples", "seed"}
_MPC_KEYS = {"N", "Nu", "Nc_eta", "Nc_other", "Q", "R"}
_SCENARIO_KEYS = {"name", "synthesis", "tables_dir", "controller",
                  "feedback", "soc_start", "soc_target", "step_budget",
                  "stop_at_target", "noise", "seed", "nmpc_max_iters"}
_BENCH_KEYS = {"scenarios", "repeats"}


def _synthesis_objects(doc: dict):
    """params, model, table, cfg, problems from a synthesis config dict."""
    _check_keys(doc, _SYNTH_KEYS | {"version"}, "synthesis config")
    params = mdl.NdcParams.from_dict(doc.get("params", {}))
    gamma1 = float(doc.get("gamma1", -0.04))
    gamma2 = float(doc.get("gamma2", 0.08))
    dt = float(doc.get("dt", 60.0))
    bp = [tuple(b) for b in doc.get("breakpoints", default_breakpoints())]
    table = build_table(params, bp, gamma1, gamma2)
    mpc_doc = dict(doc.get("mpc", {}))
    _check_keys(mpc_doc, _MPC_KEYS, "mpc config")
    cfg = MpcConfig(gamma1=gamma1, gamma2=gamma2, **mpc_doc)
    model = mdl.discretize(params, dt)
    problems = [build(model, seg, cfg) for seg in table.segments]
    return params, model, table, cfg, problems


def _theta_box(doc: dict) -> np.ndarray:
    if "theta_box" in doc:
        return np.array(doc["theta_box"], float)
    return DEFAULT_THETA_BOX


def cmd_synthesize(args) -> int:
    doc = _load_versioned(args.config, _SYNTH_KEYS, "synthesis config")
    try:
        params, model, table, cfg, problems = _synthesis_objects(doc)
    except (ConfigError, ValueError) as exc:
        print(f"synthesis failed: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS
    os.makedirs(args.out_dir, exist_ok=True)
    box = _theta_box(doc)
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    decimals = doc.get("round_decimals")
    n_cov = int(doc.get("coverage_samples", 20000))
    report = {"segments": [], "wall_time_s": None}
    t0 = time.perf_counter()
    failed = False
    for seg, prob in zip(table.segments, problems):
        try:
            sol = explore(prob, theta_box=box, seed=seed)
        except Exception as exc:
            print(f"segment {seg.index}: exploration failed: {exc}",
                  file=sys.stderr)
            failed = True
            continue
        cov = coverage_check(sol, prob, n_samples=n_cov, seed=seed + 1)
        out = rounded(sol, decimals) if decimals is not None else sol
        base = os.path.join(args.out_dir, f"table_seg{seg.index}")
        export_table(out, base + ".json", fmt="json")
        export_table(out, base + ".bin", fmt="bin")
        report["segments"].append({
            "index": seg.index,
            "lambda1": seg.lambda1,
            "lambda2": seg.lambda2,
            "r0_const": seg.r0_const,
            "n_regions": sol.n_regions,
            "stored_reals": sol.stored_reals,
            "coverage": cov,
        })
    report["wall_time_s"] = time.perf_counter() - t0
    report["total_stored_reals"] = sum(s["stored_reals"]
                                       for s in report["segments"])
    table.to_json(os.path.join(args.out_dir, "segments.json"))
    _atomic_write(os.path.join(args.out_dir, "synthesis_report.json"),
                  json.dumps(report, indent=1).encode())
    print(json.dumps(report, indent=1))
    return EXIT_SYNTHESIS if failed else EXIT_OK


def _scenario_setup(doc: dict, args) -> RunSetup:
    _check_keys(doc, _SCENARIO_KEYS | {"version"}, "scenario config")
    syn = doc.get("synthesis", {"version": 1})
    params, model, table, cfg, problems = _synthesis_objects(syn)
    controller = args.controller or doc.get("controller", "empc")
    feedback = args.feedback or doc.get("feedback", "state")
    solutions = None
    if controller == "empc":
        tables_dir = doc.get("tables_dir")
        if tables_dir:
            solutions = [import_table(os.path.join(
                tables_dir, f"table_seg{s.index}.json"))
                for s in table.segments]
        else:
            box = _theta_box(syn)
            solutions = [explore(p, theta_box=box) for p in problems]
    seed = args.seed if args.seed is not None else doc.get("seed", 0)
    return RunSetup(
        params=params, model=model, table=table, cfg=cfg,
        controller=controller, feedback=feedback,
        solutions=solutions, problems=problems,
        soc_start=float(doc.get("soc_start", 0.2)),
        soc_target=float(doc.get("soc_target", 0.9)),
        step_budget=int(doc.get("step_budget", 150)),
        stop_at_target=bool(doc.get("stop_at_target", True)),
        noise=bool(doc.get("noise", False)),
        seed=int(seed),
        nmpc_max_iters=int(doc.get("nmpc_max_iters", 10)),
    )


def cmd_run(args) -> int:
    doc = _load_versioned(args.config, _SCENARIO_KEYS, "scenario config")
    setup = _scenario_setup(doc, args)
    trace = run_closed_loop(setup)
    os.makedirs(args.out_dir, exist_ok=True)
    name = doc.get("name", "scenario")
    trace.to_csv(os.path.join(args.out_dir, f"{name}_trace.csv"))
    gamma2 = setup.cfg.gamma2
    summary = {
        "name": name,
        "completed": trace.completed,
        "charging_steps": trace.charging_steps,
        "charging_time_s": trace.charging_steps * setup.model.dt,
        "final_soc": trace.rows[-1].SoC if trace.rows else None,
        "fallback_count": trace.fallback_count,
        "max_terminal_voltage": max((r.V for r in trace.rows),
                                    default=None),
        "max_eta_violation": max((r.eta - gamma2 for r in trace.rows),
                                 default=None),
    }
    _atomic_write(os.path.join(args.out_dir, f"{name}_summary.json"),
                  json.dumps(summary, indent=1).encode())
    print(json.dumps(summary, indent=1))
    return EXIT_OK if trace.completed else EXIT_INCOMPLETE


def cmd_bench(args) -> int:
    doc = _load_versioned(args.config, _BENCH_KEYS, "bench config")
    repeats = args.repeats or int(doc.get("repeats", 20))
    base_dir = os.path.dirname(os.path.abspath(args.config))
    entries = []
    for ref in doc["scenarios"]:
        path = ref if os.path.isabs(ref) else os.path.join(base_dir, ref)
        sdoc = _load_versioned(path, _SCENARIO_KEYS, "scenario config")
        setup = _scenario_setup(sdoc, args)
        per_step_means, per_step_maxes, steps = [], [], None
        wall0 = time.perf_counter()
        for _ in range(repeats):
            trace = run_closed_loop(setup)
            ns = [r.solver_time_ns for r in trace.rows]
            per_step_means.append(float(np.mean(ns)))
            per_step_maxes.append(float(np.max(ns)))
            steps = trace.charging_steps
        entries.append({
            "name": sdoc.get("name", os.path.basename(path)),
            "controller": setup.controller,
            "repeats": repeats,
            "steps": steps,
            "mean_step_ns": float(np.mean(per_step_means)),
            "max_step_ns": float(np.max(per_step_maxes)),
            "total_wall_s": time.perf_counter() - wall0,
        })
    report = {"entries": entries}
    by_kind = {}
    for en in entries:
        by_kind.setdefault(en["controller"], []).append(en["mean_step_ns"])
    if "empc" in by_kind and "nmpc" in by_kind:
        report["nmpc_over_empc_step_ratio"] = (
            float(np.mean(by_kind["nmpc"]))
            / float(np.mean(by_kind["empc"])))
    os.makedirs(args.out_dir, exist_ok=True)
    _atomic_write(os.path.join(args.out_dir, "bench_report.json"),
                  json.dumps(report, indent=1).encode())
    print(json.dumps(report, indent=1))
    return EXIT_OK


def cmd_export_table(args) -> int:
    sol = import_table(args.table)
    fmt = args.format
    if fmt is None:
        fmt = "bin" if args.out.endswith(".bin") else "json"
    export_table(sol, args.out, fmt=fmt,
                 round_decimals=args.round_decimals)
    print(f"wrote {args.out} ({fmt}, {sol.n_regions} regions)")
    return EXIT_OK


def cmd_verify(args) -> int:
    doc = _load_versioned(args.config, _SYNTH_KEYS, "synthesis config")
    _, _, table, _, problems = _synthesis_objects(doc)
    box = _theta_box(doc)
    rng = np.random.default_rng(args.seed if args.seed is not None else 0)
    worst = 0.0
    checked = 0
    for seg, prob in zip(table.segments, problems):
        sol = import_table(os.path.join(args.tables,
                                        f"table_seg{seg.index}.json"))
        n_done = 0
        while n_done < args.samples:
            theta = rng.uniform(box[:, 0], box[:, 1])
            qp = DenseQp(prob.Sigma, prob.F @ theta, prob.G,
                         prob.S @ theta + prob.W)
            ref = solve_qp(qp)
            if ref.status != "optimal":
                continue
            n_done += 1
            idx = locate(sol, theta)
            if idx is None:
                print(f"segment {seg.index}: no region for theta={theta}",
                      file=sys.stderr)
                return EXIT_VERIFY
            r = sol.regions[idx]
            err = float(np.max(np.abs(r.K @ theta + r.g - ref.z_star)))
            worst = max(worst, err)
            if err > args.tol:
                print(f"segment {seg.index}: law mismatch {err:.3e} at "
                      f"theta={theta}", file=sys.stderr)
                return EXIT_VERIFY
        checked += n_done
    print(f"verify ok: {checked} points, worst error {worst:.3e}")
    return EXIT_OK


def main(argv=None) -> int:
    ap = argparse.ArgumentParser(prog="empcharge")
    sub = ap.add_subparsers(dest="command", required=True)

    p_syn = sub.add_parser("synthesize", help="offline region synthesis")
    p_syn.add_argument("--config", required=True)
    p_syn.add_argument("--out-dir", default="out")
    p_syn.add_argument("--seed", type=int, default=None)

    p_run = sub.add_parser("run", help="closed-loop scenario run")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--out-dir", default="out")
    p_run.add_argument("--seed", type=int, default=None)
    p_run.add_argument("--controller", choices=["empc", "qp", "nmpc"],
                       default=None)
    p_run.add_argument("--feedback", choices=["state", "ekf"], default=None)

    p_bench = sub.add_parser("bench", help="repeated timing runs")
    p_bench.add_argument("--config", required=True)
    p_bench.add_argument("--out-dir", default="out")
    p_bench.add_argument("--seed", type=int, default=None)
    p_bench.add_argument("--controller", choices=["empc", "qp", "nmpc"],
                         default=None)
    p_bench.add_argument("--feedback", choices=["state", "ekf"],
                         default=None)
    p_bench.add_argument("--repeats", type=int, default=None)

    p_exp = sub.add_parser("export-table", help="re-export a region table")
    p_exp.add_argument("table")
    p_exp.add_argument("--out", required=True)
    p_exp.add_argument("--format", choices=["json", "bin"], default=None)
    p_exp.add_argument("--round-decimals", type=int, default=None)

    p_ver = sub.add_parser("verify",
                           help="check stored tables against the QP solver")
    p_ver.add_argument("--config", required=True)
    p_ver.add_argument("--tables", required=True)
    p_ver.add_argument("--samples", type=int, default=1000)
    p_ver.add_argument("--tol", type=float, default=1e-6)
    p_ver.add_argument("--seed", type=int, default=None)

    args = ap.parse_args(argv)
    handlers = {
        "synthesize": cmd_synthesize,
        "run": cmd_run,
        "bench": cmd_bench,
        "export-table": cmd_export_table,
        "verify": cmd_verify,
    }
    try:
        return handlers[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_SYNTHESIS


if __name__ == "__main__":
    sys.exit(main())
