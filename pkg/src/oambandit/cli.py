"""Command-line entry point: ``run``, ``bound`` and ``solve-allocation``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .allocation import (
    DEFAULT_C,
    AllocationProblem,
    InfeasibleAllocation,
    exploration_threshold,
    lower_bound_constant,
    registry_gaps,
    solve_allocation,
)
from .estimator import ContextLayout, min_positive
from .harness import (
    SCENARIOS,
    ConfigError,
    EpisodeError,
    ExperimentError,
    ScenarioConfig,
    TraceSchemaError,
    builtin_scenario,
    import_external_trace,
    run_experiment,
    write_summary_csv,
)
from .instance import BanditInstance, build_registry, validate_instance

EXIT_CONFIG = 2
EXIT_RUNTIME = 3

log = logging.getLogger("oambandit")


def _load_instance(source: str) -> BanditInstance:
    if source in SCENARIOS:
        return builtin_scenario(source)
    try:
        inst = BanditInstance.load(source)
    except FileNotFoundError:
        raise ConfigError(f"instance file not found: {source}") from None
    except (json.JSONDecodeError, ValueError, TypeError) as exc:
        raise ConfigError(f"cannot parse instance {source}: {exc}") from None
    report = validate_instance(inst)
    if not report.ok:
        raise ConfigError("invalid instance: " + "; ".join(report.failures))
    return inst


def cmd_run(args) -> int:
    params = {}
    if args.u is not None:
        params["u"] = args.u
    if args.k is not None:
        params["k"] = args.k
    if args.d is not None:
        params["d"] = args.d
    algos = [a.strip() for a in args.algos.split(",") if a.strip()]
    shared = {"c": args.c, "zeta": args.zeta}
    cfg = ScenarioConfig(
        scenario=args.scenario,
        horizon=args.horizon,
        reps=args.reps,
        seed=args.seed,
        algos=algos,
        scenario_params=params,
        policy_params={a: dict(shared) for a in algos},
        out_dir=args.out,
        stride=args.stride,
        jobs=args.jobs,
    )
    summary = run_experiment(cfg)
    for path in args.import_trace or []:
        for name, series in import_external_trace(path, stride=args.stride, horizon=args.horizon).items():
            summary.join(name, series.rounds, series.mean, series.stderr, series.reps)
    if args.import_trace:
        write_summary_csv(Path(args.out) / "summary.csv", summary)
    print(json.dumps(summary.to_json(), indent=2))
    return 0


def cmd_bound(args) -> int:
    inst = _load_instance(args.instance)
    print(repr(lower_bound_constant(inst)))
    return 0


def cmd_solve(args) -> int:
    inst = _load_instance(args.instance)
    try:
        gaps_obj = json.loads(Path(args.gaps).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read gaps file {args.gaps}: {exc}") from None
    if len(gaps_obj) != inst.num_contexts or any(
        len(g) != len(ctx) for g, ctx in zip(gaps_obj, inst.contexts)
    ):
        raise ConfigError("gaps file must hold one list per context, one entry per arm")
    pair_gaps = np.concatenate([np.asarray(g, dtype=float) for g in gaps_obj])
    if np.any(pair_gaps < 0):
        raise ConfigError("gaps must be nonnegative")
    try:
        threshold = exploration_threshold(args.n, args.delta, inst.d, args.c)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    registry = build_registry(inst)
    layout = ContextLayout(registry.context_index)
    obj, con = registry_gaps(pair_gaps, layout, len(registry))
    cap = threshold / min_positive(pair_gaps, 1.0) ** 2 * 1e3
    problem = AllocationProblem(registry.unique_arms, obj, threshold, constraint_gaps=con, cap=cap)
    sol = solve_allocation(problem)
    out = {
        "threshold": threshold,
        "arms": registry.unique_arms.tolist(),
        "weights": sol.weights.tolist(),
        "saturated": sol.saturated.tolist(),
        "objective": sol.objective,
        "max_constraint_violation": sol.max_constraint_violation,
        "iterations": sol.iterations,
        "converged": sol.converged,
    }
    print(json.dumps(out, indent=2))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="oambandit", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a replicated experiment")
    run.add_argument("--scenario", required=True, help=f"one of {', '.join(SCENARIOS)} or an instance JSON file")
    run.add_argument("--u", type=float)
    run.add_argument("--k", type=int)
    run.add_argument("--d", type=int)
    run.add_argument("--horizon", type=int, required=True)
    run.add_argument("--reps", type=int, default=1)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--algos", default="oam,linucb")
    run.add_argument("--c", type=float, default=DEFAULT_C)
    run.add_argument("--zeta", type=float, default=0.1)
    run.add_argument("--stride", type=int, default=1)
    run.add_argument("--jobs", type=int, default=1)
    run.add_argument("--import-trace", action="append", metavar="CSV", help="join an external trace CSV")
    run.add_argument("--out", required=True)
    run.set_defaults(func=cmd_run)

    bound = sub.add_parser("bound", help="print the asymptotic regret constant")
    bound.add_argument("--instance", required=True)
    bound.set_defaults(func=cmd_bound)

    solve = sub.add_parser("solve-allocation", help="solve the allocation program for given gaps")
    solve.add_argument("--instance", required=True)
    solve.add_argument("--gaps", required=True)
    solve.add_argument("--n", type=int, required=True)
    solve.add_argument("--delta", type=float, required=True)
    solve.add_argument("--c", type=float, default=DEFAULT_C)
    solve.set_defaults(func=cmd_solve)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else 0
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING)
    try:
        return args.func(args)
    except (ConfigError, TraceSchemaError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (EpisodeError, ExperimentError, InfeasibleAllocation, np.linalg.LinAlgError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
