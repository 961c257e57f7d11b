"""Quick built-in checks: solver smoke problems, risk oracles, derivatives and coverage."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np

from . import ad
from .decision import THETA_TRUE, sample_dataset
from .dynamics import KMH, AgentState
from .learn import LearnedModel, erm_fit, excess_risk_bound, excess_risk_mc
from .ocp import PlannerMode, assemble
from .risk import AmbiguitySet, nested_recursion_values, risk_dual, risk_primal_oracle
from .solve import NLP, check_gradients, solve
from .tree import build_tree, paths


def _cat(parts):
    if any(isinstance(p, ad.Dual) for p in parts):
        n = next(p.nvars for p in parts if isinstance(p, ad.Dual))
        return ad.concatenate([p if isinstance(p, ad.Dual) else ad.Dual.constant(p, n) for p in parts])
    return np.concatenate([np.atleast_1d(p) for p in parts])


@dataclass
class SmokeProblem:
    name: str
    nlp: NLP
    z0: np.ndarray
    optimum: float


def smoke_problems() -> list[SmokeProblem]:
    """Twenty small convex programs whose optimal values are known in closed form
    (or from a direct linear solve)."""
    rng = np.random.default_rng(7)
    A_ls = rng.normal(size=(8, 3))
    b_ls = rng.normal(size=8)
    x_ls = np.linalg.lstsq(A_ls, b_ls, rcond=None)[0]
    M = rng.normal(size=(4, 4))
    Q = M @ M.T + 4.0 * np.eye(4)
    c_qp = rng.normal(size=4)
    A_qp = rng.normal(size=(2, 4))
    b_qp = rng.normal(size=2)
    kkt = np.block([[Q, A_qp.T], [A_qp, np.zeros((2, 2))]])
    x_qp = np.linalg.solve(kkt, np.r_[c_qp, b_qp])[:4]
    f_qp = 0.5 * x_qp @ Q @ x_qp - c_qp @ x_qp
    target = np.array([1.0, -2.0, 0.5, 3.0])
    cost = np.array([1.0, -2.0, 3.0])

    def sq(z):
        return z * z

    specs = [
        ("shifted square", 1, lambda z: (sq(z - 3.0).sum(), None, None), None, None, [0.0], 0.0),
        ("equality split", 2, lambda z: (sq(z).sum(), z[0:1] + z[1:2] - 1.0, None), None, None, [0.0, 0.0], 0.5),
        ("active inequality", 1, lambda z: ((-z).sum(), None, z - 2.0), [0.0], [10.0], [0.0], -2.0),
        ("clipped targets", 5, lambda z: (sq(z - np.arange(1.0, 6.0)).sum(), None, None),
         [0.0] * 5, [2.0] * 5, [1.0] * 5, 14.0),
        ("linear over disc", 2, lambda z: (z.sum(), None, sq(z).sum() - 1.0), None, None, [0.0, 0.0],
         -math.sqrt(2.0)),
        ("projection on halfspace", 2,
         lambda z: ((sq(z[0:1] - 1.0) + sq(z[1:2] - 2.0)).sum(), None, z[0:1] + z[1:2] - 1.0),
         None, None, [0.0, 0.0], 2.0),
        ("least squares", 3, lambda z: (sq(A_ls @ z - b_ls).sum(), None, None), None, None, [0.0] * 3,
         float(np.sum((A_ls @ x_ls - b_ls) ** 2))),
        ("cosh", 1, lambda z: ((np.exp(z) + np.exp(-z)).sum(), None, None), None, None, [1.0], 2.0),
        ("log-sum-exp plus ridge", 3,
         lambda z: ((ad.logsumexp_rows([z[0:1], z[1:2], z[2:3]]) + 0.5 * sq(z).sum()).sum(), None, None),
         None, None, [0.5, -0.2, 0.1], math.log(3.0) - 1.0 / 6.0),
        ("weighted norm over halfspace", 2,
         lambda z: ((sq(z[0:1]) + 2.0 * sq(z[1:2])).sum(), None, 3.0 - z[0:1] - z[1:2]),
         None, None, [0.0, 0.0], 6.0),
        ("equality QP", 4, lambda z: ((0.5 * (z * (Q @ z)) - c_qp * z).sum(), A_qp @ z - b_qp, None),
         None, None, [0.0] * 4, float(f_qp)),
        ("lower bound", 1, lambda z: (z.sum(), None, None), [1.0], [5.0], [3.0], 1.0),
        ("chained squares", 2, lambda z: ((sq(z[0:1] - z[1:2]) + sq(z[1:2] - 1.0)).sum(), None, None),
         None, None, [0.0, 0.0], 0.0),
        ("log barrier", 1, lambda z: ((z - np.log(z)).sum(), None, None), [0.01], [10.0], [3.0], 1.0),
        ("negative entropy", 4, lambda z: ((z * np.log(z)).sum(), z.sum() - 1.0, None),
         [1e-6] * 4, [1.0] * 4, [0.1, 0.2, 0.3, 0.4], -math.log(4.0)),
        ("norm with lower limits", 2, lambda z: (sq(z).sum(), None, np.array([1.0, 2.0]) - z),
         None, None, [0.0, 0.0], 5.0),
        ("pseudo-Huber", 4, lambda z: (np.sqrt(1.0 + sq(z - target)).sum(), None, None),
         None, None, [0.0] * 4, 4.0),
        ("flat quartic", 2,
         lambda z: ((sq(sq(z[0:1] - 2.0)) + sq(z[0:1] - 2.0 * z[1:2])).sum(), None, None),
         None, None, [0.0, 0.0], 0.0),
        ("linear over box", 3, lambda z: ((cost * z).sum(), None, None), [-1.0] * 3, [1.0] * 3, [0.0] * 3, -6.0),
        ("minimum norm point", 3,
         lambda z: (sq(z).sum(), (np.array([1.0, 2.0, 3.0]) * z).sum() - 14.0, None), None, None, [0.0] * 3, 14.0),
    ]
    out = []
    for name, n, fn, lo, hi, z0, opt in specs:
        def evaluate(z, fn=fn):
            f, ceq, cin = fn(z)
            f = f if isinstance(f, ad.Dual) else np.atleast_1d(f)
            if ceq is not None and not isinstance(ceq, ad.Dual):
                ceq = _cat([ceq])
            if cin is not None and not isinstance(cin, ad.Dual):
                cin = _cat([cin])
            return f, ceq, cin
        nlp = NLP(n, evaluate, None if lo is None else np.array(lo, float), None if hi is None else np.array(hi, float),
                  name=name)
        out.append(SmokeProblem(name, nlp, np.array(z0, float), float(opt)))
    return out


def run_smoke_suite(tol: float = 1e-6) -> dict:
    rows = []
    for prob in smoke_problems():
        res = solve(prob.nlp, prob.z0, tol=1e-9)
        err = abs(res.objective - prob.optimum)
        rows.append({"name": prob.name, "status": res.status, "objective": res.objective,
                     "optimum": prob.optimum, "error": err, "ok": err <= tol})
    return {"ok": all(r["ok"] for r in rows), "problems": rows}


def run_risk_oracle(instances: int = 200, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(instances):
        p = rng.uniform(0.01, 0.99)
        amb = AmbiguitySet(np.array([p, 1.0 - p]), rng.uniform(0.0, 3.0))
        Z = rng.uniform(-10.0, 10.0, size=2)
        worst = max(worst, abs(risk_dual(Z, amb).value - risk_primal_oracle(Z, amb).value))
    return {"ok": worst <= 1e-6, "max_gap": worst, "instances": instances}


def run_nested_check(depth: int = 3, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    tree = build_tree(depth, 2)
    payoff = rng.uniform(-1.0, 1.0, tree.node_count)
    nominal = {int(i): np.array([q, 1.0 - q]) for i, q in zip(tree.internal, rng.uniform(0.1, 0.9, len(tree.internal)))}
    zero = nested_recursion_values(tree, payoff, {i: AmbiguitySet(p, 0.0) for i, p in nominal.items()})
    expectation = 0.0
    for path in paths(tree):
        prob = np.prod([nominal[int(tree.parent[c])][tree.decision[c]] for c in path[1:]])
        expectation += prob * payoff[path[1:]].sum()
    robust = nested_recursion_values(tree, payoff, {i: AmbiguitySet(p, math.inf) for i, p in nominal.items()})
    worst = max(payoff[path[1:]].sum() for path in paths(tree))
    gap_mean = abs(zero[0] - expectation)
    gap_max = abs(robust[0] - worst)
    return {"ok": bool(gap_mean <= 1e-10 and gap_max <= 1e-8), "expectation_gap": float(gap_mean), "max_gap": float(gap_max)}


def run_gradient_check(points: int = 2, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    problem = assemble(PlannerMode.distributionally_robust(LearnedModel(THETA_TRUE, 10**6)),
                       AgentState(-15.0, 20 * KMH), AgentState(-15.0, 20 * KMH), build_tree(6, 2))
    errors = [check_gradients(problem.nlp, random_interior_point(problem, rng)) for _ in range(points)]
    return {"ok": max(errors) <= 1e-5, "max_error": max(errors), "points": points}


def random_interior_point(problem, rng) -> np.ndarray:
    """Random point strictly inside the variable box near the initial guess."""
    z = problem.initial_guess()
    lo, hi = problem.nlp.lower, problem.nlp.upper
    z = z + rng.normal(scale=0.3, size=len(z))
    lay = problem.layout
    if "lam" in lay.slices:
        z[lay.slices["lam"]] = rng.uniform(0.2, 2.0, size=len(z[lay.slices["lam"]]))
        z[lay.slices["mu"]] = rng.uniform(0.2, 2.0, size=len(z[lay.slices["mu"]]))
    span = np.where(np.isfinite(hi - lo), hi - lo, 1.0)
    return np.clip(z, np.where(np.isfinite(lo), lo + 0.01 * span, -np.inf), np.where(np.isfinite(hi), hi - 0.01 * span, np.inf))


def run_coverage(fits: int = 50, n: int = 50, seed: int = 0, mc_samples: int = 20_000) -> dict:
    r = excess_risk_bound(n)
    hits = 0
    for k in range(fits):
        data = sample_dataset(n, THETA_TRUE, seed=seed + k)
        theta = erm_fit(data).theta
        hits += excess_risk_mc(theta, THETA_TRUE, n_samples=mc_samples, seed=10_000 + k).mean <= r
    freq = hits / fits
    return {"ok": freq >= 0.95 - 3.0 * math.sqrt(0.95 * 0.05 / fits), "frequency": freq, "bound": r, "fits": fits}


def run_all() -> dict:
    out = {}
    for name, fn in (("smoke_suite", run_smoke_suite), ("risk_oracle", run_risk_oracle),
                     ("nested_recursion", run_nested_check), ("gradients", run_gradient_check),
                     ("coverage", run_coverage)):
        start = time.perf_counter()
        res = fn()
        res["seconds"] = round(time.perf_counter() - start, 3)
        out[name] = res
    out["ok"] = all(v["ok"] for v in out.values() if isinstance(v, dict))
    return out
