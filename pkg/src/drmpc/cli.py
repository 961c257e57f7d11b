"""Command-line entry point: ``drmpc <subcommand> ...``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .decision import FEATURE_BOUND, THETA_TRUE, Dataset, sample_dataset
from .dynamics import KMH, AgentState, WorldParams
from .eval import ExperimentConfig, NotConvergedError, evaluate_plan, run_experiment
from .learn import DEFAULT_ALPHA, NORM_BOUND, LearnedModel, erm_fit
from .ocp import DR, GT, ROBUST, OCPSettings, PlannerMode, PlanSolution, assemble, plan
from .tree import build_tree


class CommandError(RuntimeError):
    def __init__(self, kind: str, message: str, code: int = 2, **extra):
        super().__init__(message)
        self.kind, self.code, self.extra = kind, code, extra


def _theta(text: str) -> np.ndarray:
    try:
        vals = [float(t) for t in text.split(",")]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    if len(vals) != 2:
        raise argparse.ArgumentTypeError(f"expected two comma-separated numbers, got {text!r}")
    return np.array(vals)


def _emit(obj: dict, out: str | None) -> None:
    text = json.dumps(obj, indent=2)
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def cmd_gen_data(args) -> dict:
    data = sample_dataset(args.n, args.theta, args.feature_bound, args.seed)
    data.to_csv(args.out)
    return {"written": args.out, "n": len(data), "track_fraction": float(np.mean(data.y == 1))}


def cmd_train(args) -> dict:
    data = Dataset.from_csv(args.data)
    fit = erm_fit(data, R=args.norm_bound)
    model = LearnedModel(fit.theta, len(data), args.alpha, args.norm_bound, args.feature_bound)
    if not fit.converged:
        model.flags.append("erm_not_converged")
    model.to_json(args.out)
    return model.to_dict()


def cmd_plan(args) -> dict:
    if args.mode == DR:
        if not args.model:
            raise CommandError("usage", "--model is required for the dr mode")
        mode = PlannerMode.distributionally_robust(LearnedModel.from_json(args.model))
    elif args.mode == GT:
        mode = PlannerMode.ground_truth(args.theta)
    else:
        mode = PlannerMode.robust()
    params = WorldParams(dt=args.dt)
    problem = assemble(mode, AgentState(args.ego_position, args.ego_velocity_kmh * KMH),
                       AgentState(args.human_position, args.human_velocity_kmh * KMH),
                       build_tree(args.horizon, 2), params, OCPSettings(args.b, args.beta, args.epsilon))
    solution = plan(problem, tol=args.tol, max_iter=args.max_iter)
    solution.to_json(args.out)
    summary = {"written": args.out, "mode": solution.mode, "label": solution.label, "status": solution.status,
               "objective": solution.objective, "kkt": solution.kkt, "iterations": solution.iterations,
               "wall_time": solution.wall_time}
    if solution.status != "converged":
        raise CommandError("not_converged", f"planner stopped with status {solution.status}", code=3, **summary)
    return summary


def cmd_evaluate(args) -> dict:
    solution = PlanSolution.from_json(args.solution)
    try:
        report = evaluate_plan(solution, args.theta_true)
    except NotConvergedError as exc:
        raise CommandError("not_converged", str(exc), code=3)
    out = report.to_dict(with_paths=args.paths)
    if args.out:
        _emit(out, args.out)
        return {"written": args.out, **{k: v for k, v in out.items() if k != "paths"}}
    return out


def cmd_experiment(args) -> dict:
    config = ExperimentConfig.from_file(args.config) if args.config else ExperimentConfig()
    overrides = {}
    if args.seeds is not None:
        overrides["seeds"] = args.seeds
    if args.output_dir is not None:
        overrides["output_dir"] = args.output_dir
    config = dataclasses.replace(config, **overrides)
    report = run_experiment(config)
    return {"output_dir": config.output_dir, "summary": report["summary"],
            "seeds_passing_checks": report["checks_passed"], "seeds": config.seeds, "wall_time": report.get("wall_time")}


def cmd_selftest(args) -> dict:
    from . import selftest

    result = selftest.run_all()
    if not result["ok"]:
        raise CommandError("selftest_failed", "one or more self-checks failed", code=1, result=result)
    return result


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drmpc", description="Learning-based distributionally robust MPC "
                                     "for a road-crossing scenario.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log solver progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="sample a labelled decision dataset to CSV")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--theta", type=_theta, default=THETA_TRUE)
    p.add_argument("--feature-bound", type=float, default=FEATURE_BOUND)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="fit the norm-constrained logistic model and its ambiguity radius")
    p.add_argument("--data", required=True)
    p.add_argument("--alpha", type=float, default=DEFAULT_ALPHA)
    p.add_argument("--norm-bound", type=float, default=NORM_BOUND)
    p.add_argument("--feature-bound", type=float, default=FEATURE_BOUND)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("plan", help="solve one open-loop planning problem")
    p.add_argument("--mode", choices=(DR, GT, ROBUST), required=True)
    p.add_argument("--model", help="model JSON from `train` (dr mode)")
    p.add_argument("--theta", type=_theta, default=THETA_TRUE, help="decision parameters (gt mode)")
    p.add_argument("--ego-position", type=float, default=-15.0)
    p.add_argument("--ego-velocity-kmh", type=float, default=20.0)
    p.add_argument("--human-position", type=float, default=-15.0)
    p.add_argument("--human-velocity-kmh", type=float, default=20.0)
    p.add_argument("--horizon", type=int, default=6)
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--b", type=float, default=2.0)
    p.add_argument("--beta", type=float, default=1.5)
    p.add_argument("--epsilon", type=float, default=0.1)
    p.add_argument("--tol", type=float, default=1e-6)
    p.add_argument("--max-iter", type=int, default=500)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("evaluate", help="score a plan under the true decision distribution")
    p.add_argument("--solution", required=True)
    p.add_argument("--theta-true", type=_theta, default=THETA_TRUE)
    p.add_argument("--paths", action="store_true", help="include per-path outcomes")
    p.add_argument("--out")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("experiment", help="run the planner comparison study")
    p.add_argument("--config", help="INI file with an [experiment] section")
    p.add_argument("--seeds", type=int)
    p.add_argument("--output-dir")
    p.set_defaults(func=cmd_experiment)

    p = sub.add_parser("selftest", help="run the built-in oracle, gradient and coverage checks")
    p.set_defaults(func=cmd_selftest)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        result = args.func(args)
    except CommandError as exc:
        err = {"error": exc.kind, "message": str(exc), **exc.extra}
        print(json.dumps(err, default=_jsonable), file=sys.stderr)
        return exc.code
    except (ValueError, OSError, KeyError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 2
    print(json.dumps(result, indent=2, default=_jsonable))
    return 0


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return str(obj)


if __name__ == "__main__":
    sys.exit(main())
