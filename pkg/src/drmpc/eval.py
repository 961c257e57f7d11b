"""Ground-truth scoring of open-loop tree plans and the planner comparison study."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import time
import traceback
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .decision import FEATURE_BOUND, THETA_TRUE, feature_matrix, sample_dataset, true_conditional
from .dynamics import KMH, AgentState, WorldParams
from .learn import DEFAULT_ALPHA, NORM_BOUND, LearnedModel, asymptotic_erm_draw, erm_fit, fisher_information
from .ocp import DR, GT, ROBUST, OCPSettings, PlannerMode, PlanSolution, assemble, plan, stage_cost, terminal_cost
from .tree import ConfigurationError, ScenarioTree, build_tree

logger = logging.getLogger(__name__)

EGO_FIRST = "ego_first"
HUMAN_FIRST = "human_first"


class NotConvergedError(RuntimeError):
    """Evaluation was asked to score a plan the solver did not converge on."""


@dataclass
class PathOutcome:
    leaf: int
    probability: float
    cost: float
    violated: bool
    crossing_class: str


@dataclass
class MetricsReport:
    label: str
    mode: str
    n: int | None
    expected_cost: float
    crossing_rate: float
    stopping_rate: float
    violation_rate: float
    outcomes: list = field(default_factory=list, repr=False)

    def to_dict(self, with_paths: bool = False) -> dict:
        d = asdict(self)
        if not with_paths:
            d.pop("outcomes")
        return d


def node_probabilities(ego: np.ndarray, human: np.ndarray, tree: ScenarioTree, theta,
                       params: WorldParams = WorldParams()) -> np.ndarray:
    """Probability of reaching every node when decisions follow ``theta`` at the joint node states."""
    m = tree.internal
    x = feature_matrix(ego[m, 0], ego[m, 1], human[m, 0], human[m, 1], params.v_floor)
    cond = true_conditional(x, theta)
    prob = np.ones(tree.node_count)
    for node in range(1, tree.node_count):
        par = tree.parent[node]
        prob[node] = prob[par] * cond[par, tree.decision[node]]
    return prob


def _first_crossing(positions: np.ndarray) -> int | None:
    idx = np.flatnonzero(positions > 0)
    return int(idx[0]) if len(idx) else None


def evaluate_plan(solution: PlanSolution, theta_true=THETA_TRUE, tree: ScenarioTree | None = None,
                  params: WorldParams = WorldParams(), n: int | None = None) -> MetricsReport:
    """Score a plan against the true decision law by enumerating every root-to-leaf path.

    A path counts as crossing when the ego's first step with ``p > 0`` comes
    strictly before the human's; ties and paths where the ego never crosses
    count as stopping.
    """
    if not solution.converged:
        raise NotConvergedError(f"{solution.label}: solver status {solution.status!r}")
    ego, human, a = solution.ego, solution.human, solution.controls
    if tree is None:
        horizon = int(round(math.log2(len(ego) + 1))) - 1
        tree = build_tree(horizon, 2)
    if len(ego) != tree.node_count:
        raise ConfigurationError("plan and tree sizes differ")
    prob = node_probabilities(ego, human, tree, theta_true, params)
    m = len(tree.internal)
    node_cost = np.concatenate([stage_cost(ego[:m, 1], a, params), terminal_cost(ego[m:, 1], params)])
    unsafe = params.d_safe - np.hypot(ego[:, 0], human[:, 0]) >= 0
    outcomes = []
    for leaf in tree.leaves:
        path = [int(leaf)]
        while path[-1] != 0:
            path.append(int(tree.parent[path[-1]]))
        path.reverse()
        ego_idx = _first_crossing(ego[path, 0])
        hum_idx = _first_crossing(human[path, 0])
        ego_first = ego_idx is not None and (hum_idx is None or ego_idx < hum_idx)
        outcomes.append(PathOutcome(int(leaf), float(prob[leaf]), float(node_cost[path].sum()),
                                    bool(unsafe[path[1:]].any()), EGO_FIRST if ego_first else HUMAN_FIRST))
    probs = np.array([o.probability for o in outcomes])
    crossing = float(sum(o.probability for o in outcomes if o.crossing_class == EGO_FIRST))
    return MetricsReport(
        label=solution.label, mode=solution.mode, n=solution.n if n is None else n,
        expected_cost=float(probs @ np.array([o.cost for o in outcomes])),
        crossing_rate=crossing, stopping_rate=float(probs.sum() - crossing),
        violation_rate=float(sum(o.probability for o in outcomes if o.violated)),
        outcomes=outcomes)


def nominal_violation_probability(solution: PlanSolution, tree: ScenarioTree,
                                  params: WorldParams = WorldParams()) -> float:
    """Exact probability of a violating path under the planner's own nominal model."""
    if solution.theta is None:
        raise ConfigurationError("robust plans carry no nominal model")
    prob = node_probabilities(solution.ego, solution.human, tree, solution.theta, params)
    unsafe = params.d_safe - np.hypot(solution.ego[:, 0], solution.human[:, 0]) >= 0
    violated = np.zeros(tree.node_count, dtype=bool)
    for node in range(1, tree.node_count):
        violated[node] = violated[tree.parent[node]] or unsafe[node]
    return float(prob[tree.leaves][violated[tree.leaves]].sum())


# ---------------------------------------------------------------------------
# experiment configuration and orchestration

@dataclass
class ExperimentConfig:
    """Study settings, readable from an INI file with an ``[experiment]`` section.

    Keys mirror the field names; lists are comma separated.
    """

    seeds: int = 10
    master_seed: int = 2024
    horizon: int = 6
    dt: float = 1.0
    alpha: float = DEFAULT_ALPHA
    b: float = 2.0
    beta: float = 1.5
    epsilon: float = 0.1
    modes: tuple = (ROBUST, DR, GT)
    n_list: tuple = (1000, 1_000_000, 1_000_000_000)
    theta_true: tuple = (3.0, 3.0)
    feature_bound: float = FEATURE_BOUND
    norm_bound: float = NORM_BOUND
    ego_position: float = -15.0
    ego_velocity_kmh: float = 20.0
    human_position: float = -15.0
    human_velocity_kmh: float = 20.0
    max_explicit_n: int = 10_000_000
    solver_tol: float = 1e-6
    solver_max_iter: int = 500
    output_dir: str = "results"

    def __post_init__(self):
        if self.seeds < 1:
            raise ConfigurationError("need at least one seed")
        unknown = set(self.modes) - {ROBUST, DR, GT}
        if unknown:
            raise ConfigurationError(f"unknown modes {sorted(unknown)}")
        if any(int(n) < 1 for n in self.n_list):
            raise ConfigurationError("sample sizes must be positive")
        OCPSettings(self.b, self.beta, self.epsilon)  # validates the controller constants

    @classmethod
    def from_file(cls, path: str | Path) -> "ExperimentConfig":
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise ConfigurationError(f"cannot read config file {path}")
        if "experiment" not in parser:
            raise ConfigurationError("config file needs an [experiment] section")
        return cls.from_mapping(dict(parser["experiment"]))

    @classmethod
    def from_mapping(cls, raw: dict) -> "ExperimentConfig":
        defaults = cls()
        kwargs = {}
        for key, text in raw.items():
            if key not in cls.__dataclass_fields__:
                raise ConfigurationError(f"unknown config key {key!r}")
            current = getattr(defaults, key)
            try:
                if isinstance(current, tuple):
                    items = [t.strip() for t in str(text).split(",") if t.strip()]
                    if key == "modes":
                        kwargs[key] = tuple(items)
                    elif key == "n_list":
                        kwargs[key] = tuple(int(float(t)) for t in items)
                    else:
                        kwargs[key] = tuple(float(t) for t in items)
                elif isinstance(current, bool):
                    kwargs[key] = str(text).lower() in ("1", "true", "yes")
                elif isinstance(current, int):
                    kwargs[key] = int(float(text))
                elif isinstance(current, float):
                    kwargs[key] = float(text)
                else:
                    kwargs[key] = str(text)
            except ValueError as exc:
                raise ConfigurationError(f"bad value for {key!r}: {text!r}") from exc
        return cls(**kwargs)

    def to_ini(self) -> str:
        lines = ["[experiment]"]
        for key in self.__dataclass_fields__:
            val = getattr(self, key)
            if isinstance(val, tuple):
                val = ", ".join(str(v) for v in val)
            lines.append(f"{key} = {val}")
        return "\n".join(lines) + "\n"

    @property
    def params(self) -> WorldParams:
        return WorldParams(dt=self.dt)

    @property
    def settings(self) -> OCPSettings:
        return OCPSettings(self.b, self.beta, self.epsilon)

    @property
    def ego0(self) -> AgentState:
        return AgentState(self.ego_position, self.ego_velocity_kmh * KMH)

    @property
    def human0(self) -> AgentState:
        return AgentState(self.human_position, self.human_velocity_kmh * KMH)

    def cells(self) -> list[tuple[str, int | None]]:
        """Study columns ordered from the robust planner towards the ground-truth one."""
        out = []
        if ROBUST in self.modes:
            out.append((ROBUST, None))
        if DR in self.modes:
            out.extend((DR, int(n)) for n in sorted(self.n_list))
        if GT in self.modes:
            out.append((GT, None))
        return out


def cell_label(mode: str, n: int | None) -> str:
    if mode == DR:
        return f"DR-MPC(n=1e{round(math.log10(n))})" if n and math.log10(n).is_integer() else f"DR-MPC(n={n})"
    return {ROBUST: "R-MPC", GT: "GT-SMPC"}[mode]


def cell_seed(master_seed: int, seed_index: int, n: int) -> int:
    """Deterministic per-cell seed from the master seed, the repetition and the sample size."""
    return int(np.random.SeedSequence([master_seed, seed_index, n]).generate_state(1)[0])


def learn_model(config: ExperimentConfig, n: int, seed: int) -> LearnedModel:
    """Sample, fit and wrap a learned decision model of ``n`` samples."""
    theta_true = np.asarray(config.theta_true, dtype=float)
    if n > config.max_explicit_n:
        rng = np.random.default_rng(seed)
        info = fisher_information(theta_true, seed=seed)
        theta_hat = asymptotic_erm_draw(n, theta_true, rng, config.norm_bound, info)
        model = LearnedModel(theta_hat, n, config.alpha, config.norm_bound, config.feature_bound)
        model.flags.append("asymptotic_draw")
        return model
    data = sample_dataset(n, theta_true, config.feature_bound, seed)
    fit = erm_fit(data, config.norm_bound)
    model = LearnedModel(fit.theta, n, config.alpha, config.norm_bound, config.feature_bound)
    if not fit.converged:
        model.flags.append("erm_not_converged")
    return model


@dataclass
class CellResult:
    seed_index: int
    label: str
    mode: str
    n: int | None
    metrics: MetricsReport | None = None
    solution: PlanSolution | None = None
    model: LearnedModel | None = None
    nominal_violation: float | None = None
    wall_time: float = 0.0
    error: str | None = None

    def row(self) -> dict:
        sol, met = self.solution, self.metrics
        return {
            "seed": self.seed_index, "cell": self.label, "mode": self.mode, "n": self.n,
            "expected_cost": None if met is None else met.expected_cost,
            "crossing_rate": None if met is None else met.crossing_rate,
            "stopping_rate": None if met is None else met.stopping_rate,
            "violation_rate": None if met is None else met.violation_rate,
            "objective": None if sol is None else sol.objective,
            "delta0": None if sol is None else sol.delta0,
            "nominal_violation": self.nominal_violation,
            "radius": None if self.model is None else self.model.ambiguity_radius,
            "theta_hat": None if self.model is None else " ".join(f"{t:.6f}" for t in self.model.theta_hat),
            "status": "error" if sol is None else sol.status,
            "wall_time": round(self.wall_time, 3),
            "error": self.error,
        }


def run_cell(config: ExperimentConfig, mode: str, n: int | None, seed_index: int) -> CellResult:
    """One planner for one repetition; failures are captured rather than raised."""
    label = cell_label(mode, n)
    out = CellResult(seed_index, label, mode, n)
    start = time.perf_counter()
    tree = build_tree(config.horizon, 2)
    try:
        if mode == DR:
            out.model = learn_model(config, n, cell_seed(config.master_seed, seed_index, n))
            pmode = PlannerMode.distributionally_robust(out.model)
        elif mode == GT:
            pmode = PlannerMode.ground_truth(np.asarray(config.theta_true, dtype=float))
        else:
            pmode = PlannerMode.robust()
        problem = assemble(pmode, config.ego0, config.human0, tree, config.params, config.settings)
        out.solution = plan(problem, tol=config.solver_tol, max_iter=config.solver_max_iter)
        out.solution.label = label
        out.metrics = evaluate_plan(out.solution, np.asarray(config.theta_true, dtype=float), tree, config.params, n)
        if mode != ROBUST:
            out.nominal_violation = nominal_violation_probability(out.solution, tree, config.params)
    except Exception as exc:  # recorded per cell, the study goes on
        out.error = f"{type(exc).__name__}: {exc}"
        logger.warning("cell %s seed %d failed: %s", label, seed_index, out.error)
        logger.debug(traceback.format_exc())
    out.wall_time = time.perf_counter() - start
    return out


def qualitative_checks(results: list[CellResult]) -> dict:
    """Per-seed ordering checks along R -> DR(small n) -> ... -> DR(large n) -> GT.

    Returns ``{seed: {check: bool}}``; a check involving a failed cell is false.
    """
    by_seed: dict[int, dict[str, CellResult]] = {}
    for r in results:
        by_seed.setdefault(r.seed_index, {})[r.label] = r
    checks = {}
    for seed, cells in sorted(by_seed.items()):
        ordered = sorted(cells.values(), key=_chain_position)
        mets = [c.metrics for c in ordered]
        ok = all(m is not None for m in mets)
        cost = ok and all(a.expected_cost >= b.expected_cost for a, b in zip(mets, mets[1:]))
        cross = ok and all(a.crossing_rate <= b.crossing_rate for a, b in zip(mets, mets[1:]))
        viol = ok and all(a.violation_rate <= b.violation_rate for a, b in zip(mets, mets[1:]))
        robust = [c.metrics for c in ordered if c.mode == ROBUST]
        checks[seed] = {
            "expected_cost_nonincreasing": bool(cost),
            "crossing_rate_nondecreasing": bool(cross),
            "violation_rate_nondecreasing": bool(viol),
            "robust_violation_zero": bool(robust and robust[0] is not None and robust[0].violation_rate == 0.0),
        }
        checks[seed]["all"] = all(checks[seed].values())
    return checks


def _chain_position(cell: CellResult):
    if cell.mode == ROBUST:
        return (0, 0)
    if cell.mode == DR:
        return (1, cell.n)
    return (2, 0)


def summarize(results: list[CellResult], config: ExperimentConfig) -> dict:
    """Mean and standard deviation of each metric per study column."""
    summary = {}
    for mode, n in config.cells():
        label = cell_label(mode, n)
        rows = [r for r in results if r.label == label]
        good = [r.metrics for r in rows if r.metrics is not None]
        entry = {"mode": mode, "n": n, "runs": len(rows), "failures": len(rows) - len(good)}
        for metric in ("expected_cost", "crossing_rate", "stopping_rate", "violation_rate"):
            vals = np.array([getattr(m, metric) for m in good])
            entry[metric] = {"mean": float(vals.mean()) if len(vals) else None,
                             "std": float(vals.std()) if len(vals) else None}
        summary[label] = entry
    return summary


def run_experiment(config: ExperimentConfig, write: bool = True) -> dict:
    """Run every study column for every repetition and write the tables.

    Deterministic planners (robust and ground truth) do not depend on the
    repetition seed, so they are solved once and their result is shared by all
    repetitions.  Outputs in ``config.output_dir``: ``metrics.csv`` (one row per
    repetition and column), ``summary.csv`` (columns as in the comparison
    table, entries ``mean +- std``), ``summary.json`` and one trajectory JSON
    per solved plan under ``trajectories/``.
    """
    start = time.perf_counter()
    results: list[CellResult] = []
    shared: dict[str, CellResult] = {}
    for seed_index in range(config.seeds):
        for mode, n in config.cells():
            if mode in (ROBUST, GT):
                if mode not in shared:
                    shared[mode] = run_cell(config, mode, n, seed_index)
                base = shared[mode]
                results.append(CellResult(seed_index, base.label, mode, n, base.metrics, base.solution, None,
                                          base.nominal_violation, base.wall_time if seed_index == 0 else 0.0,
                                          base.error))
            else:
                results.append(run_cell(config, mode, n, seed_index))
            logger.info("seed %d %s done", seed_index, results[-1].label)
    checks = qualitative_checks(results)
    report = {
        "config": {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(config).items()},
        "summary": summarize(results, config),
        "checks": {str(k): v for k, v in checks.items()},
        "checks_passed": int(sum(c["all"] for c in checks.values())),
        "rows": [r.row() for r in results],
        "wall_time": time.perf_counter() - start,
    }
    if write:
        write_outputs(report, results, config)
    report["results"] = results
    return report


def write_outputs(report: dict, results: list[CellResult], config: ExperimentConfig) -> None:
    out = Path(config.output_dir)
    (out / "trajectories").mkdir(parents=True, exist_ok=True)
    rows = report["rows"]
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)
    labels = list(report["summary"].keys())
    with open(out / "summary.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric"] + labels)
        for metric in ("expected_cost", "crossing_rate", "stopping_rate", "violation_rate"):
            line = [metric]
            for label in labels:
                stat = report["summary"][label][metric]
                line.append("failed" if stat["mean"] is None else f"{stat['mean']:.6g} +- {stat['std']:.3g}")
            writer.writerow(line)
    Path(out / "summary.json").write_text(json.dumps({k: v for k, v in report.items() if k != "results"},
                                                     indent=2, default=_json_default))
    written = set()
    for r in results:
        if r.solution is None:
            continue
        name = r.label if r.mode != DR else f"{r.label}_seed{r.seed_index}"
        if name in written:
            continue
        written.add(name)
        payload = r.solution.to_dict()
        if r.metrics is not None:
            payload["metrics"] = r.metrics.to_dict(with_paths=True)
        safe = name.replace("(", "_").replace(")", "").replace("=", "")
        Path(out / "trajectories" / f"{safe}.json").write_text(json.dumps(payload, default=_json_default))


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    if hasattr(obj, "__dataclass_fields__"):
        return asdict(obj)
    raise TypeError(f"not serializable: {type(obj)}")
