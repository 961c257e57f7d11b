"""KL-ball conditional risk measures: primal oracle, smooth dual and nested recursion."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import brentq, minimize
from scipy.special import logsumexp, softmax

from .ad import logsumexp_rows, softplus
from .tree import ConfigurationError, ScenarioTree

LAMBDA_MIN = 1e-8
INFINITE_RADIUS = math.inf


@dataclass(frozen=True)
class AmbiguitySet:
    """``{p : KL(p || nominal) <= radius}``; ``radius = INFINITE_RADIUS`` is the whole simplex."""

    nominal: np.ndarray
    radius: float

    def __post_init__(self):
        nominal = np.asarray(self.nominal, dtype=float)
        if nominal.ndim != 1 or len(nominal) < 2:
            raise ConfigurationError("nominal distribution needs at least two outcomes")
        if np.any(nominal <= 0) or abs(nominal.sum() - 1.0) > 1e-9:
            raise ConfigurationError(f"nominal must be strictly positive and sum to one, got {nominal}")
        if not self.radius >= 0:
            raise ConfigurationError(f"radius must be nonnegative, got {self.radius}")
        object.__setattr__(self, "nominal", nominal)

    @property
    def robust(self) -> bool:
        return math.isinf(self.radius)


@dataclass(frozen=True)
class RiskValue:
    value: float
    lambda_star: float
    attaining_p: np.ndarray | None = None


def kl_divergence(p, q) -> float:
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    mask = p > 0
    if np.any(q[mask] <= 0):
        return math.inf
    return float(np.sum(p[mask] * np.log(p[mask] / q[mask])))


def _binary_kl(t, nominal_t):
    return kl_divergence([1.0 - t, t], [1.0 - nominal_t, nominal_t])


def risk_primal_oracle(Z, amb: AmbiguitySet) -> RiskValue:
    """``max p^T Z`` over the ambiguity set, solved directly in the primal.

    Two outcomes reduce to a monotone one-dimensional boundary search; larger
    supports fall back to multistart SLSQP.
    """
    Z = np.asarray(Z, dtype=float)
    nominal = amb.nominal
    if len(Z) != len(nominal):
        raise ConfigurationError("payoff and nominal distribution differ in length")
    if amb.radius == 0 or np.ptp(Z) == 0:
        return RiskValue(float(nominal @ Z), math.nan, nominal.copy())
    if amb.robust:
        p = np.zeros_like(nominal)
        p[np.argmax(Z)] = 1.0
        return RiskValue(float(Z.max()), math.nan, p)
    if len(Z) == 2:
        return _primal_binary(Z, amb)
    return _primal_general(Z, amb)


def _primal_binary(Z, amb):
    # mass on the larger payoff, t, is pushed up until the KL boundary or the vertex
    hi_idx = int(np.argmax(Z))
    lo_idx = 1 - hi_idx
    t0 = amb.nominal[hi_idx]
    if -math.log(t0) <= amb.radius:
        t = 1.0
    else:
        t = brentq(lambda s: _binary_kl(s, t0) - amb.radius, t0, 1.0, xtol=1e-15, rtol=4 * np.finfo(float).eps,
                   maxiter=500)
    p = np.empty(2)
    p[hi_idx], p[lo_idx] = t, 1.0 - t
    return RiskValue(float(p @ Z), math.nan, p)


def _primal_general(Z, amb, starts: int = 8, seed: int = 0):
    rng = np.random.default_rng(seed)
    d = len(Z)
    cons = [{"type": "eq", "fun": lambda p: p.sum() - 1.0},
            {"type": "ineq", "fun": lambda p: amb.radius - kl_divergence(np.clip(p, 0, None), amb.nominal)}]
    best = None
    inits = [amb.nominal] + [0.5 * amb.nominal + 0.5 * rng.dirichlet(np.ones(d)) for _ in range(starts - 1)]
    for p0 in inits:
        res = minimize(lambda p: -(p @ Z), p0, jac=lambda p: -Z, bounds=[(0.0, 1.0)] * d,
                       constraints=cons, method="SLSQP", options={"ftol": 1e-12, "maxiter": 500})
        p = np.clip(res.x, 0.0, None)
        p /= p.sum()
        if kl_divergence(p, amb.nominal) <= amb.radius + 1e-7 and (best is None or p @ Z > best @ Z):
            best = p
    if best is None:
        best = amb.nominal.copy()
    return RiskValue(float(best @ Z), math.nan, best)


def _excess_exp(y):
    """``exp(y) - 1 - y`` without cancellation for small ``|y|``."""
    y = np.asarray(y, dtype=float)
    small = np.abs(y) < 1e-2
    series = y * y * (0.5 + y * (1 / 6 + y * (1 / 24 + y * (1 / 120 + y / 720))))
    return np.where(small, series, np.expm1(y) - y)


def _centered_cgf(y, nominal):
    """``log E_nominal exp(y)`` for payoffs centred so that ``E_nominal y = 0``."""
    if np.max(np.abs(y)) < 1.0:
        return float(np.log1p(nominal @ _excess_exp(y)))
    return float(logsumexp(y, b=nominal))


def _tilted(Z, nominal, lam):
    return softmax(np.log(nominal) + Z / lam)


def _tilted_kl(y, nominal):
    """``KL(q || nominal)`` for ``q ~ nominal * exp(y)`` with centred ``y``."""
    c = _centered_cgf(y, nominal)
    if np.max(np.abs(y)) < 1.0:
        # E_q y = exp(-c) E_nominal[y expm1(y)] since E_nominal y = 0
        return math.exp(-c) * float(nominal @ (y * np.expm1(y))) - c
    q = softmax(np.log(nominal) + y)
    return kl_divergence(q, nominal)


def _dual_objective(Z, nominal, radius, lam):
    mean = float(nominal @ Z)
    return mean + lam * radius + lam * _centered_cgf((Z - mean) / lam, nominal)


def risk_dual(Z, amb: AmbiguitySet) -> RiskValue:
    """``min_{lam > 0} lam * radius + lam * log E_nominal exp(Z / lam)``.

    The stationarity condition ``KL(p_lam || nominal) = radius`` for the tilted
    distribution ``p_lam ~ nominal * exp(Z / lam)`` is monotone in ``lam`` and
    solved by bracketing root finding.  Payoffs are centred at their nominal
    mean so that tiny radii (huge ``lam``) keep full precision.
    """
    Z = np.asarray(Z, dtype=float)
    nominal = amb.nominal
    if amb.radius == 0:
        return RiskValue(float(nominal @ Z), math.inf, nominal.copy())
    zmax = float(Z.max())
    top = Z == zmax
    if amb.robust or np.ptp(Z) == 0 or amb.radius >= -math.log(nominal[top].sum()):
        return RiskValue(zmax, LAMBDA_MIN, None)

    spread = float(np.ptp(Z))
    mean = float(nominal @ Z)
    centred = Z - mean
    if amb.radius < 1e-150:
        # y = O(sqrt(radius)) would underflow in the KL; the expansion error is O(radius * spread)
        var = float(nominal @ centred**2)
        lam = math.sqrt(var / (2.0 * amb.radius))
        return RiskValue(mean + math.sqrt(2.0 * amb.radius * var), lam, nominal.copy())

    def excess_kl(log_lam):
        return _tilted_kl(centred / math.exp(log_lam), nominal) - amb.radius

    lo = math.log(spread) - 2.0
    while excess_kl(lo) < 0:
        lo -= 2.0
    hi = math.log(spread) - 0.5 * math.log(amb.radius) + 1.0
    while excess_kl(hi) > 0:
        hi += 2.0
    log_lam = brentq(excess_kl, lo, hi, xtol=1e-13, rtol=4 * np.finfo(float).eps, maxiter=500)
    lam = math.exp(log_lam)
    return RiskValue(float(_dual_objective(Z, nominal, amb.radius, lam)), lam, _tilted(Z, nominal, lam))


def optimal_multipliers(Z, log_nominal, radius, iterations: int = 60) -> np.ndarray:
    """Row-wise minimizer ``lam* >= LAMBDA_MIN`` of ``lam*radius + lam*log sum_j p_j exp(Z_j/lam)``.

    ``Z`` and ``log_nominal`` have shape ``(m, d)``.  Each row solves
    ``KL(p_lam || p) = radius`` in ``s = log lam`` by Newton steps kept inside a
    shrinking bisection bracket.  Rows whose worst case is a vertex (or whose
    payoff is constant) return ``LAMBDA_MIN``.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    log_nominal = np.atleast_2d(np.asarray(log_nominal, dtype=float))
    lam = np.full(Z.shape[0], LAMBDA_MIN)
    if radius == 0:
        return np.ones(Z.shape[0])
    zmax = Z.max(axis=1, keepdims=True)
    spread = zmax[:, 0] - Z.min(axis=1)
    top = np.isclose(Z, zmax, rtol=0.0, atol=0.0)
    log_top = logsumexp(np.where(top, log_nominal, -np.inf), axis=1)
    # spreads at roundoff level are treated as constant payoffs
    active = (spread > 1e-12 * (1.0 + np.abs(zmax[:, 0]))) & (radius < -log_top) & np.isfinite(radius)
    if not np.any(active):
        return lam
    Za, lpa, sp = Z[active], log_nominal[active], spread[active]
    shifted = Za - Za.max(axis=1, keepdims=True)

    def kl_and_slope(s):
        inv = np.exp(-s)[:, None]
        logits = lpa + shifted * inv
        logq = logits - logsumexp(logits, axis=1, keepdims=True)
        q = np.exp(logq)
        kl = np.sum(q * (logq - lpa), axis=1)
        mean = np.sum(q * shifted, axis=1, keepdims=True)
        var = np.sum(q * (shifted - mean) ** 2, axis=1) * inv[:, 0] ** 2
        return kl - radius, -var

    lo = np.log(sp) - 40.0  # kl - radius > 0 at lo (near the vertex), < 0 at hi
    hi = np.log(sp) + 40.0
    s = np.log(sp) - 0.5 * math.log(radius)
    done = np.zeros(len(s), dtype=bool)
    for _ in range(iterations):
        f, df = kl_and_slope(s)
        done |= np.abs(f) <= 1e-15 * max(1.0, radius)
        if np.all(done):
            break
        lo = np.where(f > 0, s, lo)
        hi = np.where(f <= 0, s, hi)
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            newton = s - f / df
        inside = np.isfinite(newton) & (newton >= lo) & (newton <= hi)
        s_new = np.where(done, s, np.where(inside, newton, 0.5 * (lo + hi)))
        done |= np.abs(s_new - s) <= 1e-12
        s = s_new
    lam[active] = np.maximum(np.exp(s), LAMBDA_MIN)
    return lam


def kl_dual_residual(Z_terms, log_nominal_terms, gamma, lam, radius):
    """Vectorized epigraph residual ``lam*radius + lam*log sum_j p_j exp(Z_j/lam) - gamma``.

    ``Z_terms`` and ``log_nominal_terms`` are lists with one entry per outcome;
    entries may be arrays or :class:`~drmpc.ad.Dual` values over nodes.  With
    ``radius == 0`` the exact expectation is used in place of the dual.
    """
    if radius == 0:
        acc = None
        for z, lp in zip(Z_terms, log_nominal_terms):
            term = np.exp(lp) * z
            acc = term if acc is None else acc + term
        return acc - gamma
    inner = logsumexp_rows([lp + z / lam for z, lp in zip(Z_terms, log_nominal_terms)])
    return lam * radius + lam * inner - gamma


def dual_epigraph_residual(Z, gamma, lam, amb: AmbiguitySet):
    """Residual ``<= 0`` iff ``(gamma, lam)`` certifies ``rho(Z) <= gamma``."""
    if lam < LAMBDA_MIN:
        raise ConfigurationError(f"dual multiplier below {LAMBDA_MIN}")
    Z = [np.atleast_1d(np.asarray(z, dtype=float)) if not hasattr(z, "jac") else z for z in Z]
    log_nom = [np.atleast_1d(math.log(p)) for p in amb.nominal]
    res = kl_dual_residual(Z, log_nom, gamma, lam, amb.radius)
    return float(res[0]) if isinstance(res, np.ndarray) else res


def sigmoid_upper(g, b: float = 2.0, beta: float = 1.5):
    """Smooth upper bound ``b / (1 + exp(-beta g))`` of the indicator ``g >= 0``."""
    if b < 2.0:
        raise ConfigurationError(f"sigmoid height b={b} < 2 does not dominate the step indicator")
    if not beta > 0:
        raise ConfigurationError(f"sigmoid slope must be positive, got {beta}")
    return b * np.exp(-softplus(-beta * g))


def nested_recursion_values(tree: ScenarioTree, payoff, sets) -> np.ndarray:
    """Bottom-up ``gamma_i = rho_i[payoff_children + gamma_children]``; leaves carry 0.

    ``payoff`` is indexed by node id (the root entry is ignored); ``sets`` maps an
    internal node id to its :class:`AmbiguitySet`.
    """
    payoff = np.asarray(payoff, dtype=float)
    gamma = np.zeros(tree.node_count)
    for node in tree.internal[::-1]:
        kids = tree.children_of(int(node))
        gamma[node] = risk_dual(payoff[kids] + gamma[kids], sets[int(node)]).value
    return gamma
