"""Scenario-tree planning problems (DR-MPC, GT-SMPC, R-MPC) as smooth NLPs.

Variable layout, in order::

    p_e[node] (all nodes), v_e[node] (all nodes), a_e[internal],
    gamma[internal], lambda[internal], delta[internal], mu[internal]

The robust planner keeps only ``gamma`` among the auxiliaries.  Internal
nodes are ids ``0 .. n_internal - 1`` (breadth-first numbering), so a
quantity over all nodes is the concatenation of its internal and leaf parts.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import ad
from .decision import THETA_TRUE, features
from .dynamics import AgentState, WorldParams, rollout_human
from .learn import LearnedModel
from .risk import LAMBDA_MIN, kl_dual_residual, optimal_multipliers, sigmoid_upper
from .solve import NLP, SolveResult, estimate_multipliers, solve
from .tree import ConfigurationError, ScenarioTree

DR = "dr"
GT = "gt"
ROBUST = "robust"
DIST_SMOOTHING = 1e-6
SMOOTH_OFFSET = math.sqrt(DIST_SMOOTHING)


@dataclass(frozen=True)
class PlannerMode:
    kind: str
    theta: np.ndarray | None = None
    radius: float = 0.0
    n: int | None = None

    @classmethod
    def distributionally_robust(cls, model: LearnedModel) -> "PlannerMode":
        return cls(DR, np.asarray(model.theta_hat, float), float(model.ambiguity_radius), int(model.n))

    @classmethod
    def ground_truth(cls, theta=THETA_TRUE) -> "PlannerMode":
        return cls(GT, np.asarray(theta, float), 0.0)

    @classmethod
    def robust(cls) -> "PlannerMode":
        return cls(ROBUST)

    @property
    def label(self) -> str:
        if self.kind == DR:
            return f"DR-MPC(n={self.n:.0e})" if self.n else "DR-MPC"
        return {GT: "GT-SMPC", ROBUST: "R-MPC"}[self.kind]


@dataclass(frozen=True)
class OCPSettings:
    b: float = 2.0
    beta: float = 1.5
    epsilon: float = 0.1
    # back-off on the hard collision constraints so solver-tolerance slack stays safe
    g_margin: float = 1e-4
    robust_objective: str = "max"

    def __post_init__(self):
        if not 0.0 < self.epsilon <= 1.0:
            raise ConfigurationError(f"epsilon must lie in (0, 1], got {self.epsilon}")
        if self.b < 2.0:
            raise ConfigurationError(f"sigmoid height b={self.b} < 2 violates the epigraph condition")
        if not self.beta > 0:
            raise ConfigurationError("sigmoid slope beta must be positive")
        if self.robust_objective not in ("max", "mean"):
            raise ConfigurationError(f"unknown robust objective {self.robust_objective!r}")


def stage_cost(v, a, params: WorldParams = WorldParams()):
    dv = v - params.v_ref
    return params.q_velocity * dv * dv + params.r_accel * a * a


def terminal_cost(v, params: WorldParams = WorldParams()):
    dv = v - params.v_ref
    return params.p_velocity * dv * dv


@dataclass
class Layout:
    node_count: int
    n_internal: int
    robust: bool

    def __post_init__(self):
        n, m = self.node_count, self.n_internal
        names = ["p", "v", "a", "gamma"] + ([] if self.robust else ["lam", "delta", "mu"])
        sizes = [n, n, m, m] + ([] if self.robust else [m, m, m])
        self.slices = {}
        start = 0
        for name, size in zip(names, sizes):
            self.slices[name] = slice(start, start + size)
            start += size
        self.size = start

    def split(self, z) -> dict:
        return {k: z[s] for k, s in self.slices.items()}


@dataclass
class OCPProblem:
    mode: PlannerMode
    tree: ScenarioTree
    params: WorldParams
    settings: OCPSettings
    ego0: AgentState
    human0: AgentState
    human: np.ndarray
    layout: Layout
    nlp: NLP = field(repr=False)

    @property
    def n_variables(self) -> int:
        return self.layout.size

    def log_nominal(self, p_e, v_e):
        """Log decision probabilities ``[brake, track]`` at internal nodes."""
        m = self.tree.internal
        f_ego, f_hum = features(p_e[m], v_e[m], self.human[m, 0], self.human[m, 1], self.params.v_floor)
        theta = self.mode.theta
        score = f_ego * theta[0] + f_hum * theta[1]
        return [-ad.softplus(-score), -ad.softplus(score)]

    def margins(self, p_e):
        """Collision margin ``g`` at every node.

        The smoothed distance never exceeds the exact one, so ``g <= 0`` here
        implies the exact margin is nonpositive too.
        """
        ph = self.human[:, 0]
        return self.params.d_safe + SMOOTH_OFFSET - np.sqrt(p_e * p_e + (ph * ph + DIST_SMOOTHING))

    def initial_guess(self) -> np.ndarray:
        """Zero controls, zero-control state rollout, auxiliaries from the recursion at unit multipliers."""
        tree, lay = self.tree, self.layout
        z = np.zeros(lay.size)
        depth = tree.depth.astype(float)
        p = self.ego0.position + self.ego0.velocity * self.params.dt * depth
        v = np.full(tree.node_count, self.ego0.velocity)
        z[lay.slices["p"]] = p
        z[lay.slices["v"]] = v
        ones = np.ones(len(tree.internal))
        payload = self.payload(p, v, np.zeros(len(tree.internal)))
        gamma = self._recursion(payload, p, v, ones, robust_max=self.mode.kind == ROBUST)
        z[lay.slices["gamma"]] = gamma[tree.internal]
        if self.mode.kind != ROBUST:
            z[lay.slices["lam"]] = 1.0
            z[lay.slices["mu"]] = 1.0
            risk_payload = np.asarray(sigmoid_upper(self.margins(p), self.settings.b, self.settings.beta))
            delta = self._recursion(risk_payload, p, v, ones, robust_max=False)
            z[lay.slices["delta"]] = delta[tree.internal]
        return z

    def payload(self, p, v, a):
        """Stage cost at internal nodes and terminal cost at leaves, indexed by node."""
        m = len(self.tree.internal)
        if isinstance(v, ad.Dual):
            return ad.concatenate([stage_cost(v[:m], a, self.params), terminal_cost(v[m:], self.params)])
        return np.concatenate([stage_cost(v[:m], a, self.params), terminal_cost(v[m:], self.params)])

    def _recursion(self, payload, p, v, lam, robust_max):
        tree = self.tree
        out = np.zeros(tree.node_count)
        kids = tree.children
        if robust_max or self.mode.kind == ROBUST:
            for node in tree.internal[::-1]:
                k = kids[node]
                vals = payload[k] + out[k]
                out[node] = vals.max() if self.settings.robust_objective == "max" or robust_max else vals.mean()
            return out
        log_nom = self.log_nominal(p, v)
        for node in tree.internal[::-1]:
            k = kids[node]
            Z = [np.atleast_1d(payload[k[j]] + out[k[j]]) for j in range(tree.branching)]
            lp = [np.atleast_1d(log_nom[j][node]) for j in range(tree.branching)]
            out[node] = kl_dual_residual(Z, lp, 0.0, lam[node], self.mode.radius)[0]
        return out

    def profile_multipliers(self, z):
        """Copy of ``z`` with ``lam`` and ``mu`` set to the row-wise dual minimizers."""
        tree, lay = self.tree, self.layout
        z = np.array(z, dtype=float)
        x = lay.split(z)
        p, v = x["p"], x["v"]
        m = len(tree.internal)
        kids = tree.children
        log_nom = np.stack(self.log_nominal(p, v), axis=1)
        payload = self.payload(p, v, x["a"])
        gamma_all = np.concatenate([x["gamma"], np.zeros(tree.node_count - m)])
        z[lay.slices["lam"]] = optimal_multipliers(payload[kids] + gamma_all[kids], log_nom, self.mode.radius)
        risk = np.asarray(sigmoid_upper(self.margins(p), self.settings.b, self.settings.beta))
        delta_all = np.concatenate([x["delta"], np.zeros(tree.node_count - m)])
        z[lay.slices["mu"]] = optimal_multipliers(risk[kids] + delta_all[kids], log_nom, self.mode.radius)
        return z

    # condensed form: controls only, states by rollout, auxiliaries by exact recursion --------
    def rollout(self, a):
        """Ego positions and velocities at every node for controls ``a`` (numpy or Dual)."""
        tree, dt = self.tree, self.params.dt
        cat = ad.concatenate if isinstance(a, ad.Dual) else np.concatenate
        if isinstance(a, ad.Dual):
            p_lv = [ad.Dual.constant([self.ego0.position], a.nvars)]
            v_lv = [ad.Dual.constant([self.ego0.velocity], a.nvars)]
        else:
            p_lv, v_lv = [np.array([self.ego0.position])], [np.array([self.ego0.velocity])]
        for k in range(1, tree.horizon + 1):
            nodes = tree.nodes_at_depth(k)
            par = tree.parent[nodes]
            rel = par - tree.nodes_at_depth(k - 1)[0]
            p_lv.append(p_lv[-1][rel] + v_lv[-1][rel] * dt)
            v_lv.append(v_lv[-1][rel] + a[par] * dt)
        return cat(p_lv), cat(v_lv)

    def nested_values(self, a, risk=False):
        """``(values at every node, multipliers at internal nodes)`` of the cost or risk recursion.

        Multipliers are the exact dual minimizers computed from the numeric
        values and then held fixed, which gives the correct derivative of the
        optimal value (envelope theorem).
        """
        tree = self.tree
        p, v = self.rollout(a)
        log_nom = self.log_nominal(p, v)
        if risk:
            payload = sigmoid_upper(self.margins(p), self.settings.b, self.settings.beta)
        else:
            payload = self.payload(p, v, a)
        dual = isinstance(a, ad.Dual)
        levels = [None] * (tree.horizon + 1)
        levels[tree.horizon] = ad.Dual.constant(np.zeros(len(tree.nodes_at_depth(tree.horizon))), a.nvars) \
            if dual else np.zeros(len(tree.nodes_at_depth(tree.horizon)))
        mults = [None] * tree.horizon
        d = tree.branching
        for k in range(tree.horizon - 1, -1, -1):
            nodes = tree.nodes_at_depth(k)
            kids = tree.nodes_at_depth(k + 1)
            below = payload[kids] + levels[k + 1]
            Z = [below[j::d] for j in range(d)]
            lp = [log_nom[j][nodes] for j in range(d)]
            Zv = np.stack([ad.value(t) for t in Z], axis=1)
            lpv = np.stack([ad.value(t) for t in lp], axis=1)
            lam = optimal_multipliers(Zv, lpv, self.mode.radius)
            mults[k] = lam
            levels[k] = kl_dual_residual(Z, lp, 0.0, lam, self.mode.radius)
        cat = ad.concatenate if dual else np.concatenate
        return cat(levels), np.concatenate(mults)

    def condensed_evaluate(self, a):
        p, v = self.rollout(a)
        gamma, _ = self.nested_values(a)
        delta, _ = self.nested_values(a, risk=True)
        objective = stage_cost(v[0:1], a[0:1], self.params) + gamma[0:1]
        cat = ad.concatenate if isinstance(a, ad.Dual) else np.concatenate
        c_in = cat([v[1:] - self.params.v_max, self.params.v_min - v[1:], delta[0:1] - self.settings.epsilon])
        return objective, None, c_in

    def condensed_nlp(self) -> NLP:
        m = len(self.tree.internal)
        return NLP(m, self.condensed_evaluate, np.full(m, self.params.a_min), np.full(m, self.params.a_max),
                   name=f"{self.mode.label} (condensed)")

    def expand(self, a) -> np.ndarray:
        """Full variable vector with tight epigraphs for controls ``a``."""
        lay, m = self.layout, len(self.tree.internal)
        a = np.asarray(a, dtype=float)
        p, v = self.rollout(a)
        gamma, lam = self.nested_values(a)
        delta, mu = self.nested_values(a, risk=True)
        z = np.zeros(lay.size)
        z[lay.slices["p"]], z[lay.slices["v"]], z[lay.slices["a"]] = p, v, a
        z[lay.slices["gamma"]] = gamma[:m]
        z[lay.slices["lam"]], z[lay.slices["delta"]], z[lay.slices["mu"]] = lam, delta[:m], mu
        return z

    def evaluate(self, z):
        tree, lay, params, st = self.tree, self.layout, self.params, self.settings
        x = lay.split(z)
        p, v, a, gamma = x["p"], x["v"], x["a"], x["gamma"]
        m = len(tree.internal)
        n_leaf = tree.node_count - m
        par = tree.parent[1:]
        eq = ad.concatenate if isinstance(z, ad.Dual) else np.concatenate

        c_eq = eq([p[0:1] - self.ego0.position, v[0:1] - self.ego0.velocity,
                   p[1:] - p[par] - v[par] * params.dt, v[1:] - v[par] - a[par] * params.dt])

        payload = self.payload(p, v, a)
        zeros_leaf = ad.Dual.constant(np.zeros(n_leaf), z.nvars) if isinstance(z, ad.Dual) else np.zeros(n_leaf)
        gamma_all = eq([gamma, zeros_leaf])
        kids = tree.children
        obj_terms = [payload[kids[:, j]] + gamma_all[kids[:, j]] for j in range(tree.branching)]
        objective = stage_cost(v[0:1], a[0:1], params) + gamma[0:1]
        g = self.margins(p)

        if self.mode.kind == ROBUST:
            if st.robust_objective == "max":
                epi = [t - gamma for t in obj_terms]
            else:
                mean = obj_terms[0]
                for t in obj_terms[1:]:
                    mean = mean + t
                epi = [mean * (1.0 / tree.branching) - gamma]
            c_in = eq(epi + [g[1:] + st.g_margin])
            return objective, c_eq, c_in

        lam, delta, mu = x["lam"], x["delta"], x["mu"]
        log_nom = self.log_nominal(p, v)
        obj_res = kl_dual_residual(obj_terms, log_nom, gamma, lam, self.mode.radius)
        risk = sigmoid_upper(g, st.b, st.beta)
        delta_all = eq([delta, zeros_leaf])
        cc_terms = [risk[kids[:, j]] + delta_all[kids[:, j]] for j in range(tree.branching)]
        cc_res = kl_dual_residual(cc_terms, log_nom, delta, mu, self.mode.radius)
        c_in = eq([obj_res, cc_res, delta[0:1] - st.epsilon])
        return objective, c_eq, c_in


def assemble(mode: PlannerMode, ego0: AgentState, human0: AgentState, tree: ScenarioTree,
             params: WorldParams = WorldParams(), settings: OCPSettings = OCPSettings()) -> OCPProblem:
    if mode.kind not in (DR, GT, ROBUST):
        raise ConfigurationError(f"unknown planner mode {mode.kind!r}")
    if mode.kind != ROBUST and (mode.theta is None or len(mode.theta) != 2):
        raise ConfigurationError("stochastic planners need a two-dimensional theta")
    if not mode.radius >= 0 or math.isinf(mode.radius):
        raise ConfigurationError(f"ambiguity radius must be finite and nonnegative, got {mode.radius}")
    human = rollout_human(human0, tree, params)
    layout = Layout(tree.node_count, len(tree.internal), mode.kind == ROBUST)
    n = layout.size
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    lower[layout.slices["v"]] = params.v_min
    upper[layout.slices["v"]] = params.v_max
    lower[layout.slices["a"]] = params.a_min
    upper[layout.slices["a"]] = params.a_max
    if mode.kind != ROBUST:
        for name in ("lam", "mu"):
            if mode.radius == 0:
                # multipliers do not enter the zero-radius (expectation) residual
                lower[layout.slices[name]] = upper[layout.slices[name]] = 1.0
            else:
                lower[layout.slices[name]] = LAMBDA_MIN
    problem = OCPProblem(mode, tree, params, settings, ego0, human0, human, layout, nlp=None)
    profile = profiled = None
    if mode.kind != ROBUST and mode.radius > 0:
        # each lam/mu enters only its own epigraph row, so it can be minimized out exactly
        profile = problem.profile_multipliers
        profiled = np.r_[np.arange(n)[layout.slices["lam"]], np.arange(n)[layout.slices["mu"]]]
    problem.nlp = NLP(n, problem.evaluate, lower, upper, name=mode.label, profile=profile, profiled=profiled)
    return problem


@dataclass
class PlanSolution:
    mode: str
    label: str
    radius: float
    ego: np.ndarray
    controls: np.ndarray
    human: np.ndarray
    gamma: np.ndarray
    delta: np.ndarray | None
    lam: np.ndarray | None
    mu: np.ndarray | None
    objective: float
    status: str
    kkt: dict
    iterations: int
    wall_time: float
    margins: np.ndarray
    nominal: np.ndarray | None
    feature_bound_violation_rate: float
    max_violation: float
    theta: list | None = None
    n: int | None = None

    @property
    def converged(self) -> bool:
        return self.status == "converged"

    @property
    def gamma0(self) -> float:
        return float(self.gamma[0])

    @property
    def delta0(self) -> float | None:
        return None if self.delta is None else float(self.delta[0])

    def to_dict(self) -> dict:
        out = {}
        for k, v in self.__dict__.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "PlanSolution":
        arrays = {"ego", "controls", "human", "gamma", "delta", "lam", "mu", "margins", "nominal"}
        kw = {k: (np.asarray(v, float) if k in arrays and v is not None else v) for k, v in d.items()}
        return cls(**kw)

    @classmethod
    def from_json(cls, path: str | Path) -> "PlanSolution":
        return cls.from_dict(json.loads(Path(path).read_text()))


def plan(problem: OCPProblem, z0=None, condense: bool = True, polish_rho: float = 1e3,
         **solver_options) -> PlanSolution:
    """Solve the planning NLP.

    Stochastic modes first solve the condensed problem over the controls
    (states by rollout, ``gamma``/``delta`` by the exact recursion), expand the
    result to the full variable vector and then run the full solve from there
    with least-squares multiplier estimates.  The reported status and KKT
    residuals always refer to the full NLP.
    """
    if problem.mode.kind == ROBUST or not condense:
        z0 = problem.initial_guess() if z0 is None else z0
        return solution_from_result(problem, solve(problem.nlp, z0, **solver_options))
    a0 = np.zeros(len(problem.tree.internal)) if z0 is None else problem.layout.split(np.asarray(z0))["a"]
    condensed = solve(problem.condensed_nlp(), a0, **solver_options)
    z = problem.expand(condensed.x)
    y, w = estimate_multipliers(problem.nlp, z)
    options = dict(solver_options)
    options.setdefault("rho0", polish_rho)
    result = solve(problem.nlp, z, y0=y, w0=w, **options)
    result.wall_time += condensed.wall_time
    result.inner_iterations += condensed.inner_iterations
    result.log = [dict(entry, phase="condensed") for entry in condensed.log] + result.log
    return solution_from_result(problem, result)


def solution_from_result(problem: OCPProblem, result: SolveResult) -> PlanSolution:
    lay, tree = problem.layout, problem.tree
    x = lay.split(result.x)
    p, v = x["p"], x["v"]
    ego = np.stack([p, v], axis=1)
    g = problem.params.d_safe - np.hypot(p, problem.human[:, 0])
    nominal = None
    violation_rate = 0.0
    if problem.mode.kind != ROBUST:
        nominal = np.exp(np.stack(problem.log_nominal(p, v), axis=1))
        m = tree.internal
        feats = np.stack(features(p[m], v[m], problem.human[m, 0], problem.human[m, 1], problem.params.v_floor), axis=1)
        violation_rate = float(np.mean(np.linalg.norm(feats, axis=1) > math.sqrt(18.0)))
    _, ceq, cin = problem.nlp.values(result.x)
    max_violation = max(float(np.max(np.abs(ceq))), float(np.max(cin, initial=0.0)))
    return PlanSolution(
        mode=problem.mode.kind, label=problem.mode.label, radius=problem.mode.radius,
        ego=ego, controls=x["a"].copy(), human=problem.human.copy(), gamma=x["gamma"].copy(),
        delta=x.get("delta"), lam=x.get("lam"), mu=x.get("mu"),
        objective=result.objective, status=result.status,
        kkt={"stationarity": result.kkt.stationarity, "primal": result.kkt.primal,
             "complementarity": result.kkt.complementarity},
        iterations=result.iterations, wall_time=result.wall_time, margins=g, nominal=nominal,
        feature_bound_violation_rate=violation_rate, max_violation=max_violation,
        theta=None if problem.mode.theta is None else [float(t) for t in problem.mode.theta],
        n=problem.mode.n)
