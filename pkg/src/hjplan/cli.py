"""Command-line interface and benchmark harness.

Subcommands::

    hjplan solve   <scenario.json> -o <dir>     one plan, written to <dir>
    hjplan rollout <scenario.json> -o <dir>     execute with discovery/replanning
    hjplan bench   <scenario.json ...> --reps N timing/iteration report (JSON)
    hjplan validate <output> <scenario.json>    re-check a written result

Exit codes: 0 converged and valid, 2 non-converged or invalid, 1 error.
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from .planner import PlanResult, plan_once, rollout_with_discovery, validate
from .scenario_io import (
    Scenario,
    ScenarioError,
    parse_scenario,
    read_output,
    write_outputs,
)
from .solver import Plan, SolveDiagnostics

__all__ = ["main", "run_benchmark"]


def _apply_overrides(scenario: Scenario, args) -> Scenario:
    solver = scenario.solver
    if args.seed is not None:
        solver = replace(solver, seed=args.seed)
    if args.max_iters is not None:
        solver = replace(solver, max_iters=args.max_iters)
    solver = replace(solver, parallel=bool(getattr(args, "parallel", False)))
    return replace(scenario, solver=solver)


def run_benchmark(
    scenario_paths: list[str | Path], repetitions: int = 3, parallel: bool = False
) -> dict:
    """Median wall time, iteration counts and convergence per scenario."""

    def run_one(path):
        scenario = parse_scenario(path)
        wall, iters, converged, values = [], [], [], []
        for _ in range(repetitions):
            t0 = time.perf_counter()
            result = plan_once(scenario)
            wall.append(time.perf_counter() - t0)
            iters.append(result.plan.diagnostics.iterations)
            converged.append(result.plan.converged)
            values.append(result.plan.value)
        return {
            "scenario": str(path),
            "repetitions": repetitions,
            "median_wall_time": statistics.median(wall) if wall else None,
            "iterations": iters,
            "converged": converged,
            "values": values,
        }

    if parallel and len(scenario_paths) > 1:
        with ThreadPoolExecutor(max_workers=min(4, len(scenario_paths))) as pool:
            rows = list(pool.map(run_one, scenario_paths))
    else:
        rows = [run_one(p) for p in scenario_paths]
    return {"tool": "hjplan", "kind": "bench", "scenarios": rows}


def _cmd_solve(args) -> int:
    scenario = _apply_overrides(parse_scenario(args.scenario), args)
    t0 = time.perf_counter()
    result = plan_once(scenario)
    wall = time.perf_counter() - t0
    out = write_outputs(result, args.output, scenario)
    if not args.quiet:
        d = result.plan.diagnostics
        print(
            f"value={result.plan.value:.6f} horizon={result.plan.horizon:g} "
            f"iterations={d.iterations} converged={d.converged} "
            f"attempts={d.attempts} wall={wall:.2f}s -> {out}"
        )
    return 0 if result.ok else 2


def _cmd_rollout(args) -> int:
    scenario = _apply_overrides(parse_scenario(args.scenario), args)
    t0 = time.perf_counter()
    rollout = rollout_with_discovery(scenario)
    wall = time.perf_counter() - t0
    out = write_outputs(rollout, args.output, scenario)
    if not args.quiet:
        n_disc = sum(1 for e in rollout.events if e.kind == "discovery")
        print(
            f"plans={len(rollout.plans)} discoveries={n_disc} "
            f"arrived={rollout.arrived} aborted={rollout.aborted} "
            f"wall={wall:.2f}s -> {out}"
        )
    return 0 if rollout.arrived and not rollout.aborted else 2


def _cmd_bench(args) -> int:
    report = run_benchmark(args.scenarios, args.reps, parallel=args.parallel)
    text = json.dumps(report, indent=1, sort_keys=True)
    if args.output:
        Path(args.output).write_text(text)
    if not args.quiet:
        print(text)
    return 0


def _cmd_validate(args) -> int:
    scenario = parse_scenario(args.scenario)
    doc = read_output(args.output_file)
    scene = scenario.build_scene()
    if doc["kind"] == "rollout":
        agents = doc["agents"]
        times = np.asarray(doc["times"])
    else:
        agents = doc["agents"]
        times = np.asarray(doc["times"])
    states = [np.asarray(a["states"], dtype=float) for a in agents]
    controls = [
        np.asarray(a.get("controls", np.zeros((max(len(times) - 1, 0), 1))))
        for a in agents
    ]
    plan = Plan(
        states=states,
        controls=controls,
        times=times,
        value=doc.get("value", float("nan")),
        horizon=float(times[-1]) if len(times) else 0.0,
        diagnostics=SolveDiagnostics(),
        saddle=None,
    )
    report = validate(
        plan, scene, scenario.models, include_hidden=args.include_hidden
    )
    ok = report.collision_free and all(
        e < scenario.goal_tol for e in report.goal_errors
    )
    if not args.quiet:
        print(
            f"collision_free={report.collision_free} "
            f"min_pair_distance={report.min_pair_distance:.4f} "
            f"min_obstacle_clearance={report.min_obstacle_clearance:.4f} "
            f"max_goal_error={max(report.goal_errors):.4f}"
        )
    return 0 if ok else 2


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="hjplan", description="time-optimal multi-agent path planner"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, output_required=True):
        p.add_argument("--seed", type=int, default=None, help="override RNG seed")
        p.add_argument("--max-iters", type=int, default=None)
        p.add_argument("--quiet", action="store_true")
        mode = p.add_mutually_exclusive_group()
        mode.add_argument(
            "--sequential", dest="parallel", action="store_false",
            help="deterministic single-threaded sweeps (default)",
        )
        mode.add_argument("--parallel", dest="parallel", action="store_true")
        p.set_defaults(parallel=False)

    p = sub.add_parser("solve", help="plan one scenario")
    p.add_argument("scenario")
    p.add_argument("-o", "--output", required=True, help="output directory")
    common(p)
    p.set_defaults(func=_cmd_solve)

    p = sub.add_parser("rollout", help="execute with discovery and replanning")
    p.add_argument("scenario")
    p.add_argument("-o", "--output", required=True)
    common(p)
    p.set_defaults(func=_cmd_rollout)

    p = sub.add_parser("bench", help="timing report over scenarios")
    p.add_argument("scenarios", nargs="*")
    p.add_argument("--reps", type=int, default=3)
    p.add_argument("-o", "--output", default=None, help="write report JSON here")
    p.add_argument("--quiet", action="store_true")
    p.add_argument("--parallel", action="store_true")
    p.set_defaults(func=_cmd_bench)

    p = sub.add_parser("validate", help="re-check a written result")
    p.add_argument("output_file")
    p.add_argument("scenario")
    p.add_argument("--include-hidden", action="store_true")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=_cmd_validate)
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ScenarioError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
