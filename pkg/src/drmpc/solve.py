"""Augmented-Lagrangian NLP solver with an L-BFGS-B inner loop.

Problems have the form::

    min f(z)  s.t.  c_eq(z) = 0,  c_in(z) <= 0,  lower <= z <= upper

and are evaluated through a single callable returning ``(f, c_eq, c_in)``.
Derivatives come from :mod:`drmpc.ad` unless a hand-coded ``derivatives``
callable is supplied.

An NLP may declare a block of ``profiled`` variables together with a
``profile`` map that sets them to a joint minimizer of every constraint they
enter (they must not enter the objective or the equalities).  The solver then
eliminates that block: each merit evaluation first applies ``profile``, and by
the envelope theorem the reduced gradient is the full gradient with the block
zeroed.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np
from scipy.optimize import minimize

from .ad import Dual

logger = logging.getLogger(__name__)

CONVERGED = "converged"
MAX_ITER = "max_iter"
LINE_SEARCH_FAILURE = "line_search_failure"


class NonFiniteError(FloatingPointError):
    """An evaluator produced NaN or Inf."""

    def __init__(self, message, variable=None, constraint=None):
        super().__init__(message)
        self.variable = variable
        self.constraint = constraint


def _empty(n):
    return np.zeros(0), np.zeros((0, n))


@dataclass
class NLP:
    n: int
    evaluate: Callable
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    derivatives: Callable | None = None
    name: str = "nlp"
    compress: bool = True
    profile: Callable | None = None
    profiled: np.ndarray | None = None

    def __post_init__(self):
        self.lower = np.full(self.n, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(self.n, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (self.n,) or self.upper.shape != (self.n,):
            raise ValueError("bounds must have one entry per variable")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")

    def values(self, z):
        f, ceq, cin = self.evaluate(np.asarray(z, dtype=float))
        return (float(np.asarray(f).ravel()[0]),
                np.zeros(0) if ceq is None else np.asarray(ceq, float).ravel(),
                np.zeros(0) if cin is None else np.asarray(cin, float).ravel())

    def _forward(self, z, seed):
        f, ceq, cin = self.evaluate(Dual(np.asarray(z, dtype=float), seed))
        k = seed.shape[1]
        ceq = Dual(np.zeros(0), np.zeros((0, k))) if ceq is None else ceq
        cin = Dual(np.zeros(0), np.zeros((0, k))) if cin is None else cin
        return f, ceq, cin

    def _dense(self, z):
        f, ceq, cin = self._forward(z, np.eye(self.n))
        return float(f.val[0]), f.jac[0], ceq.val, ceq.jac, cin.val, cin.jac

    def _build_coloring(self, z):
        """Sparsity pattern from dense sweeps at ``z`` and two random points, then greedy column coloring."""
        rng = np.random.default_rng(0)
        lo = np.where(np.isfinite(self.lower), self.lower, z - 1.0)
        hi = np.where(np.isfinite(self.upper), self.upper, z + 1.0)
        pattern = None
        for point in (z, rng.uniform(lo, hi), rng.uniform(lo, hi)):
            parts = self._dense(point)
            jac = np.vstack([parts[1][None, :], parts[3], parts[5]])
            nz = np.isfinite(jac) & (jac != 0)
            pattern = nz if pattern is None else pattern | nz
        rows, cols = np.nonzero(pattern)
        by_col = [[] for _ in range(self.n)]
        by_row = [[] for _ in range(pattern.shape[0])]
        for r, c in zip(rows, cols):
            by_col[c].append(r)
            by_row[r].append(c)
        color = np.full(self.n, -1)
        for c in range(self.n):
            taken = {color[o] for r in by_col[c] for o in by_row[r] if color[o] >= 0}
            k = 0
            while k in taken:
                k += 1
            color[c] = k
        n_colors = int(color.max()) + 1 if self.n else 0
        seed = np.zeros((self.n, n_colors))
        seed[np.arange(self.n), color] = 1.0
        self._coloring = (seed, rows, cols, color[cols])

    def full(self, z):
        """``(f, grad f, c_eq, J_eq, c_in, J_in)`` at ``z``.

        With ``compress`` the constraint Jacobian comes from one forward sweep
        per column color (Curtis-Powell-Reid).  The objective gradient is row
        zero of the same pattern, so a dense objective disables compression.
        """
        z = np.asarray(z, dtype=float)
        if self.derivatives is not None:
            return self.derivatives(z)
        if not self.compress:
            return self._dense(z)
        if getattr(self, "_coloring", None) is None:
            self._build_coloring(z)
        seed, rows, cols, slot = self._coloring
        f, ceq, cin = self._forward(z, seed)
        m_eq = len(ceq.val)
        packed = np.vstack([f.jac[:1], ceq.jac, cin.jac])
        jac = np.zeros((packed.shape[0], self.n))
        jac[rows, cols] = packed[rows, slot]
        return float(f.val[0]), jac[0], ceq.val, jac[1:m_eq + 1], cin.val, jac[m_eq + 1:]


@dataclass
class KKTResidual:
    stationarity: float
    primal: float
    complementarity: float

    def max(self) -> float:
        return max(self.stationarity, self.primal, self.complementarity)


@dataclass
class SolveResult:
    x: np.ndarray
    objective: float
    kkt: KKTResidual
    status: str
    iterations: int
    inner_iterations: int
    wall_time: float
    multipliers_eq: np.ndarray
    multipliers_in: np.ndarray
    log: list = field(default_factory=list, repr=False)

    @property
    def converged(self) -> bool:
        return self.status == CONVERGED


def _check_finite(z, parts):
    names = ("objective", "objective gradient", "equality", "equality Jacobian", "inequality", "inequality Jacobian")
    for name, arr in zip(names, parts):
        arr = np.asarray(arr, dtype=float)
        if not np.all(np.isfinite(arr)):
            bad = np.argwhere(~np.isfinite(np.atleast_1d(arr)))[0]
            constraint = int(bad[0]) if name.startswith(("equality", "inequality")) else None
            variable = int(bad[-1]) if name.endswith(("gradient", "Jacobian")) else None
            raise NonFiniteError(f"non-finite {name} (index {tuple(int(b) for b in bad)})",
                                 variable=variable, constraint=constraint)
    if not np.all(np.isfinite(z)):
        raise NonFiniteError("non-finite iterate", variable=int(np.flatnonzero(~np.isfinite(z))[0]))


def kkt_residual(nlp: NLP, z, y, w, parts=None, scaled: bool = True) -> KKTResidual:
    """Infinity-norm KKT residuals for multipliers ``y`` (equalities) and ``w >= 0`` (inequalities).

    Stationarity is the projected gradient of the Lagrangian on the bound box;
    with ``scaled`` it is divided by ``max(1, |grad f|_inf)``.
    """
    f, g, ceq, jeq, cin, jin = nlp.full(z) if parts is None else parts
    grad_l = g + jeq.T @ y + jin.T @ w
    step = np.clip(z - grad_l, nlp.lower, nlp.upper) - z
    stat = float(np.max(np.abs(step))) if len(z) else 0.0
    if scaled:
        stat /= max(1.0, float(np.max(np.abs(g))) if len(g) else 1.0)
    primal = max(float(np.max(np.abs(ceq))) if len(ceq) else 0.0,
                 float(np.max(np.maximum(cin, 0.0))) if len(cin) else 0.0)
    comp = float(np.max(np.abs(w * cin))) if len(cin) else 0.0
    return KKTResidual(stat, primal, comp)


def estimate_multipliers(nlp: NLP, z, active_tol: float = 1e-8, parts=None):
    """Least-squares multipliers ``(y, w >= 0)`` for the stationarity condition at ``z``.

    Inequalities with ``c_in > -active_tol`` are treated as active; variables
    sitting on a bound are left out of the fit since their bound multiplier
    absorbs any residual.
    """
    from scipy.optimize import lsq_linear

    f, g, ceq, jeq, cin, jin = nlp.full(z) if parts is None else parts
    active = np.flatnonzero(cin > -active_tol)
    free = (z > nlp.lower + 1e-12) & (z < nlp.upper - 1e-12)
    mat = np.hstack([jeq.T, jin[active].T])[free]
    lo = np.r_[np.full(len(ceq), -np.inf), np.zeros(len(active))]
    y = np.zeros(len(ceq))
    w = np.zeros(len(cin))
    if mat.shape[1] == 0:
        return y, w
    sol = lsq_linear(mat, -g[free], bounds=(lo, np.full(len(lo), np.inf)), method="bvls", lsq_solver="exact")
    y = sol.x[:len(ceq)]
    w[active] = sol.x[len(ceq):]
    return y, w


def solve(nlp: NLP, z0, tol: float = 1e-6, max_iter: int = 500, rho0: float = 10.0, rho_max: float = 1e10,
          inner_max_iter: int = 2000, log_stream: TextIO | None = None, scaled: bool = True,
          y0=None, w0=None) -> SolveResult:
    """Minimize ``nlp`` from ``z0`` by the Powell-Hestenes-Rockafellar augmented Lagrangian.

    Each outer iteration minimizes the augmented Lagrangian over the bound box
    with L-BFGS-B, then updates ``y += rho c_eq`` and
    ``w = max(0, w + rho c_in)``.  The penalty grows tenfold whenever the
    constraint violation fails to shrink by a factor of four.  ``max_iter``
    caps the outer iterations.
    """
    start = time.perf_counter()
    z = np.clip(np.asarray(z0, dtype=float).copy(), nlp.lower, nlp.upper)
    parts = nlp.full(z)
    _check_finite(z, parts)
    y = np.zeros(len(parts[2])) if y0 is None else np.array(y0, dtype=float)
    w = np.zeros(len(parts[4])) if w0 is None else np.array(w0, dtype=float)
    rho = rho0
    bounds = list(zip(np.where(np.isfinite(nlp.lower), nlp.lower, None),
                      np.where(np.isfinite(nlp.upper), nlp.upper, None)))
    last_violation = np.inf
    inner_tol = 1e-2
    inner_total = 0
    history = []
    status = MAX_ITER
    cache = {}

    reduce = nlp.profile is not None
    if reduce:
        z = nlp.profile(z)
        parts = nlp.full(z)

    def merit(zz):
        key = zz.tobytes()
        if key not in cache:
            cache.clear()
            if reduce:
                zz = nlp.profile(zz)
            p = nlp.full(zz)
            _check_finite(zz, p)
            cache[key] = p
        f, g, ceq, jeq, cin, jin = cache[key]
        shifted = np.maximum(w + rho * cin, 0.0)
        val = f + y @ ceq + 0.5 * rho * ceq @ ceq + (shifted @ shifted - w @ w) / (2.0 * rho)
        grad = g + jeq.T @ (y + rho * ceq) + jin.T @ shifted
        if reduce:
            grad[nlp.profiled] = 0.0
        return val, grad

    kkt = kkt_residual(nlp, z, y, w, parts, scaled)
    inner_tol = max(0.1 * tol, min(inner_tol, kkt.max()))
    it = 0
    if kkt.max() <= tol:
        # the starting point already certifies optimality with the given multipliers
        max_iter, status = 0, CONVERGED
    for it in range(1, max_iter + 1):
        merit_start = float(merit(z)[0])
        res = minimize(merit, z, jac=True, method="L-BFGS-B", bounds=bounds,
                       options={"maxiter": inner_max_iter, "maxcor": 30, "gtol": inner_tol,
                                "ftol": 1e-15, "maxls": 40})
        inner_total += res.nit
        z = nlp.profile(res.x) if reduce else res.x
        merit_value = float(res.fun)
        parts = nlp.full(z)
        _check_finite(z, parts)
        f, g, ceq, jeq, cin, jin = parts
        violation = max(float(np.max(np.abs(ceq))) if len(ceq) else 0.0,
                        float(np.max(np.abs(np.maximum(cin, -w / rho)))) if len(cin) else 0.0)
        y = y + rho * ceq
        w = np.maximum(w + rho * cin, 0.0)
        kkt = kkt_residual(nlp, z, y, w, parts, scaled)
        entry = {"iteration": it, "merit_start": merit_start, "merit": merit_value, "objective": f, "rho": rho,
                 "stationarity": kkt.stationarity, "primal": kkt.primal,
                 "complementarity": kkt.complementarity, "inner": res.nit, "inner_status": int(res.status)}
        history.append(entry)
        line = " ".join(f"{k}={v:.6e}" if isinstance(v, float) else f"{k}={v}" for k, v in entry.items())
        logger.debug(line)
        if log_stream is not None:
            print(line, file=log_stream)
        if kkt.max() <= tol:
            status = CONVERGED
            break
        if violation > tol and violation > 0.25 * last_violation and rho < rho_max:
            rho = min(rho * 10.0, rho_max)
        last_violation = min(violation, last_violation) if violation > 0.25 * last_violation else violation
        inner_tol = max(tol * 0.1, min(inner_tol * 0.1, 0.1 * kkt.max()))
        if res.status == 2 and res.nit == 0 and inner_tol <= tol * 0.1 and rho >= rho_max:
            status = LINE_SEARCH_FAILURE
            break
    f = parts[0]
    it = min(it, max_iter)
    return SolveResult(z, float(f), kkt, status, it, inner_total, time.perf_counter() - start, y, w, history)


def check_gradients(nlp: NLP, z, h: float = 1e-6) -> float:
    """Worst relative error between algorithmic and central-difference derivatives.

    The error of each output row is measured as
    ``|J_ad - J_fd|_inf / max(1, |J_ad|_inf)``.
    """
    z = np.asarray(z, dtype=float)
    f, g, ceq, jeq, cin, jin = nlp.full(z)
    jac = np.vstack([g[None, :], jeq, jin])
    fd = np.empty_like(jac)
    for i in range(nlp.n):
        zp = z.copy()
        zm = z.copy()
        zp[i] += h
        zm[i] -= h
        fp, ep, ip = nlp.values(zp)
        fm, em, im = nlp.values(zm)
        fd[:, i] = (np.concatenate([[fp], ep, ip]) - np.concatenate([[fm], em, im])) / (2.0 * h)
    scale = np.maximum(1.0, np.max(np.abs(jac), axis=1))
    return float(np.max(np.max(np.abs(jac - fd), axis=1) / scale))
