"""Command line entry point: ``distvar run | search-offset | summarize``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from importlib.resources import files
from pathlib import Path

from .agents import run_simulation
from .report import TraceFormatError, read_trace, summarize, write_summary, write_trace
from .scenario import KVAR_SCALE, ScenarioError, SimulationConfig, load_config
from .search import OffsetSearchError, search_attack_offset

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_NOT_CONVERGED = 2

log = logging.getLogger("distvar")


def bundled_scenario(name: str) -> Path:
    """Path of a scenario shipped with the package (``fig6_baseline``, ``fig6_attack``)."""
    return Path(str(files("distvar") / "scenarios" / f"{name.removesuffix('.json')}.json"))


def _resolve(spec: str) -> Path:
    path = Path(spec)
    if path.exists():
        return path
    bundled = bundled_scenario(spec)
    return bundled if bundled.exists() else path


def _load(spec: str, args: argparse.Namespace) -> SimulationConfig:
    cfg = load_config(_resolve(spec))
    changes = {}
    if getattr(args, "tau", None) is not None:
        changes["tau"] = args.tau * KVAR_SCALE
    for key in ("window", "max_iter", "alpha"):
        if getattr(args, key, None) is not None:
            changes[key] = getattr(args, key)
    if changes:
        cfg = cfg.with_solver(**changes)
        if cfg.solver.window < 1 or cfg.solver.max_iter < 0 or cfg.solver.tau < 0:
            raise ScenarioError("solver overrides: need window >= 1, max_iter >= 0, tau >= 0")
        if cfg.solver.alpha is not None and not cfg.solver.alpha > 0:
            raise ScenarioError("--alpha must be positive")
    return cfg


def run_scenario(args: argparse.Namespace) -> int:
    cfg = _load(args.scenario, args)
    trace_path = args.trace or cfg.output.trace or f"{cfg.name}_trace.csv"
    summary_path = args.summary or cfg.output.summary or f"{cfg.name}_summary.json"
    trace = run_simulation(cfg)
    summary = summarize(trace, cfg)
    summary["scenario"] = cfg.name
    write_trace(trace, trace_path)
    write_summary(summary, summary_path)
    print(f"{cfg.name}: {len(trace)} iterations, stop_reason={trace.stop_reason}, "
          f"converged_at={trace.converged_at}")
    print(f"trace -> {trace_path}\nsummary -> {summary_path}")
    if trace.stop_reason != "converged":
        print("error: iteration cap reached without convergence", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def search_offset(args: argparse.Namespace) -> int:
    cfg = _load(args.scenario, args)
    try:
        res = search_attack_offset(cfg, args.node, args.target_q * KVAR_SCALE, q_tol=args.q_tol * KVAR_SCALE,
                                   start_iteration=args.start)
    except OffsetSearchError as exc:
        print(f"error: {exc}; best offset {exc.best_offset:.9g} gives q={exc.best_q:.6g} var", file=sys.stderr)
        return EXIT_NOT_CONVERGED
    print(json.dumps({"node": res.node, "target_q_var": res.target_q, "offset_up": res.offset, "offset_lo": 0.0,
                      "achieved_q_var": res.achieved_q, "converged": res.converged,
                      "evaluations": res.evaluations}, indent=2))
    return EXIT_OK if res.converged else EXIT_NOT_CONVERGED


def summarize_trace(args: argparse.Namespace) -> int:
    trace = read_trace(args.trace)
    cfg = _load(args.scenario, args) if args.scenario else None
    if cfg is not None:
        if trace.records and len(trace.final.q) != cfg.n:
            raise ScenarioError(f"trace has {len(trace.final.q)} nodes, scenario has {cfg.n}")
        trace = replace(trace, attack=cfg.attack)
    summary = summarize(trace, cfg)
    text = json.dumps(summary, indent=2)
    if args.output:
        write_summary(summary, args.output)
    else:
        print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="distvar", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def solver_flags(p: argparse.ArgumentParser) -> None:
        p.add_argument("--tau", type=float, help="fluctuation threshold in kvar")
        p.add_argument("--window", type=int, help="consecutive settled iterations required")
        p.add_argument("--max-iter", dest="max_iter", type=int, help="iteration cap")
        p.add_argument("--alpha", type=float, help="dual step size override")

    run = sub.add_parser("run", help="simulate a scenario and write trace + summary")
    run.add_argument("scenario", help="scenario JSON path or bundled name")
    solver_flags(run)
    run.add_argument("--trace", help="trace CSV output path")
    run.add_argument("--summary", help="summary JSON output path")
    run.set_defaults(func=run_scenario)

    so = sub.add_parser("search-offset", help="find the theta_up offset that drives a node's q to a target")
    so.add_argument("scenario")
    so.add_argument("--node", type=int, required=True)
    so.add_argument("--target-q", dest="target_q", type=float, default=0.0, help="target q in kvar")
    so.add_argument("--q-tol", dest="q_tol", type=float, default=1e-3, help="accepted miss in kvar")
    so.add_argument("--start", type=int, help="attack start iteration (default: scenario or 1500)")
    solver_flags(so)
    so.set_defaults(func=search_offset)

    sm = sub.add_parser("summarize", help="digest a trace CSV")
    sm.add_argument("trace")
    sm.add_argument("--scenario", help="scenario the trace came from (enables voltage/KKT/curtailment fields)")
    sm.add_argument("-o", "--output", help="write the summary here instead of stdout")
    sm.set_defaults(func=summarize_trace)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, TraceFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
