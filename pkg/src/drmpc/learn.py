"""Norm-constrained logistic ERM, excess-risk bounds and KL ambiguity radii."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .decision import FEATURE_BOUND, Dataset, sample_ball, true_conditional
from .tree import ConfigurationError

logger = logging.getLogger(__name__)

NORM_BOUND = FEATURE_BOUND
DEFAULT_ALPHA = 0.05


def _scores(theta, X):
    return np.asarray(X, dtype=float) @ np.asarray(theta, dtype=float)


def _loss_and_grad(theta, X, y):
    margin = y * (X @ theta)
    loss = np.mean(np.logaddexp(0.0, margin))
    grad = X.T @ (y * expit(margin)) / len(y)
    return loss, grad


def empirical_risk(theta, data: Dataset) -> float:
    """Mean negative log-likelihood in nats."""
    if len(data) == 0:
        raise ConfigurationError("empirical risk of an empty dataset")
    margin = np.asarray(data.y, dtype=float) * _scores(theta, data.X)
    return float(np.mean(np.logaddexp(0.0, margin)))


def project_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    norm = np.linalg.norm(theta)
    return theta if norm <= radius else theta * (radius / norm)


@dataclass
class FitResult:
    theta: np.ndarray
    converged: bool
    iterations: int
    grad_norm: float
    objective: float


def erm_fit(data: Dataset, R: float = NORM_BOUND, tol: float = 1e-10, max_iter: int = 10_000,
            theta0=None, method: str = "newton") -> FitResult:
    """Minimize the empirical risk over ``||theta|| <= R``.

    ``method="projected_gradient"`` runs projected gradient descent with
    backtracking.  ``method="newton"`` solves the same problem through its KKT
    system: Newton's method on ``risk + mu/2 ||theta||^2`` with the multiplier
    ``mu >= 0`` found by root search on ``||theta(mu)|| = R``; it is much
    faster for large, ill-conditioned samples.

    ``grad_norm`` is the norm of the unit-step projected-gradient mapping,
    ``theta - P(theta - grad)``, which vanishes exactly at the constrained optimum.
    """
    if len(data) == 0:
        raise ConfigurationError("cannot fit an empty dataset")
    if not R > 0:
        raise ConfigurationError(f"norm bound must be positive, got {R}")
    X = np.asarray(data.X, dtype=float)
    y = np.asarray(data.y, dtype=float)
    if method == "newton":
        return _erm_newton(X, y, R, tol, theta0)
    if method != "projected_gradient":
        raise ConfigurationError(f"unknown ERM method {method!r}")
    theta = project_ball(np.zeros(X.shape[1]) if theta0 is None else np.asarray(theta0, float), R)
    f, g = _loss_and_grad(theta, X, y)
    # 1/L for the logistic loss, L <= mean ||x||^2 / 4
    step = 4.0 / max(np.mean(np.sum(X * X, axis=1)), 1e-12)
    gnorm = np.linalg.norm(theta - project_ball(theta - g, R))
    it = 0
    while it < max_iter and gnorm > tol:
        it += 1
        t = step * 2.0
        while True:
            cand = project_ball(theta - t * g, R)
            diff = cand - theta
            f_new, g_new = _loss_and_grad(cand, X, y)
            if f_new <= f + g @ diff + diff @ diff / (2.0 * t) + 1e-15 or t < 1e-12:
                break
            t *= 0.5
        step = t
        if np.array_equal(cand, theta):
            theta, f, g = cand, f_new, g_new
            gnorm = np.linalg.norm(theta - project_ball(theta - g, R))
            break
        theta, f, g = cand, f_new, g_new
        gnorm = np.linalg.norm(theta - project_ball(theta - g, R))
    converged = gnorm <= tol or _stalled_at_optimum(theta, g, R, tol)
    if not converged:
        logger.warning("ERM stopped after %d iterations with projected-gradient norm %.3e", it, gnorm)
    return FitResult(theta, bool(converged), it, float(gnorm), float(f))


def _ridge_newton(X, y, mu, theta, max_iter: int = 100):
    """Minimizer of ``risk + mu/2 ||theta||^2`` by damped Newton; ``None`` if it diverges."""
    n = len(y)
    for _ in range(max_iter):
        margin = y * (X @ theta)
        f = np.mean(np.logaddexp(0.0, margin)) + 0.5 * mu * theta @ theta
        p = expit(margin)
        g = X.T @ (y * p) / n + mu * theta
        if np.linalg.norm(g) <= 1e-13 * max(1.0, np.abs(theta).max()):
            return theta
        H = (X * (p * (1.0 - p))[:, None]).T @ X / n + mu * np.eye(len(theta))
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            return None
        t = 1.0
        while True:
            cand = theta + t * step
            f_new = np.mean(np.logaddexp(0.0, y * (X @ cand))) + 0.5 * mu * cand @ cand
            # roundoff slack: near the optimum the decrease drops below the precision of f
            if f_new <= f + 1e-4 * t * (g @ step) + 1e-15 * abs(f) or t < 1e-10:
                break
            t *= 0.5
        if not np.all(np.isfinite(cand)) or np.linalg.norm(cand) > 1e8:
            return None
        if np.linalg.norm(cand - theta) <= 1e-15 * max(1.0, np.linalg.norm(theta)):
            return cand
        theta = cand
    return theta


def _erm_newton(X, y, R, tol, theta0):
    from scipy.optimize import brentq

    start = np.zeros(X.shape[1]) if theta0 is None else project_ball(np.asarray(theta0, float), R)
    theta = _ridge_newton(X, y, 0.0, start.copy())
    solves = 1
    if theta is None or np.linalg.norm(theta) > R:
        warm = {"theta": start.copy()}

        def excess_norm(log_mu):
            nonlocal solves
            solves += 1
            th = _ridge_newton(X, y, math.exp(log_mu), warm["theta"].copy())
            if th is None:
                return math.inf
            warm["theta"] = th
            return float(np.linalg.norm(th) - R)

        lo, hi = -30.0, 0.0
        while excess_norm(hi) > 0:
            lo, hi = hi, hi + 5.0
        log_mu = brentq(excess_norm, lo, hi, xtol=1e-14, rtol=4 * np.finfo(float).eps, maxiter=200)
        theta = _ridge_newton(X, y, math.exp(log_mu), warm["theta"].copy())
        # the constraint is active, so the optimum lies on the sphere
        theta = theta * (R / np.linalg.norm(theta))
    f, g = _loss_and_grad(theta, X, y)
    gnorm = float(np.linalg.norm(theta - project_ball(theta - g, R)))
    converged = gnorm <= tol or _stalled_at_optimum(theta, g, R, tol)
    if not converged:
        logger.warning("Newton ERM ended with projected-gradient norm %.3e", gnorm)
    return FitResult(theta, bool(converged), solves, gnorm, float(f))


def _stalled_at_optimum(theta, g, R, tol):
    # on the boundary with the gradient pointing outward the optimum is attained
    # even if the unit-step mapping is limited by roundoff
    norm = np.linalg.norm(theta)
    if abs(norm - R) > 1e-9 * R:
        return False
    tangential = g - (g @ theta) / (norm * norm) * theta
    return bool(g @ theta < 0 and np.linalg.norm(tangential) <= max(tol, 1e-12) * 10)


@dataclass
class MonteCarloEstimate:
    mean: float
    stderr: float


def true_risk(theta_hat, theta_true, feature_law=None, n_samples: int = 200_000, seed: int = 0) -> MonteCarloEstimate:
    """Cross-entropy risk ``E_x H(p_true(.|x), p_hat(.|x))`` by Monte Carlo.

    ``feature_law`` is either an ``(m, 2)`` array of feature samples or a callable
    ``(n, rng) -> samples``; the default is uniform on the ``sqrt(18)`` ball.
    """
    X = _feature_samples(feature_law, n_samples, seed)
    p = true_conditional(X, theta_true)
    log_q = _log_conditional(X, theta_hat)
    h = -np.sum(p * log_q, axis=1)
    return MonteCarloEstimate(float(np.mean(h)), float(np.std(h, ddof=1) / math.sqrt(len(h))))


def conditional_kl(X, theta_true, theta_hat) -> np.ndarray:
    """``KL(p_true(.|x) || p_hat(.|x))`` per feature row."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    log_p = _log_conditional(X, theta_true)
    log_q = _log_conditional(X, theta_hat)
    return np.sum(np.exp(log_p) * (log_p - log_q), axis=1)


def excess_risk_mc(theta_hat, theta_true, feature_law=None, n_samples: int = 200_000,
                   seed: int = 0) -> MonteCarloEstimate:
    """Excess risk computed as the mean conditional KL over the feature law."""
    X = _feature_samples(feature_law, n_samples, seed)
    kl = conditional_kl(X, theta_true, theta_hat)
    return MonteCarloEstimate(float(np.mean(kl)), float(np.std(kl, ddof=1) / math.sqrt(len(kl))))


def _log_conditional(X, theta):
    # [log P(brake), log P(track)] with P(track) = 1 / (1 + exp(s))
    s = _scores(theta, X)
    return np.stack([-np.logaddexp(0.0, -s), -np.logaddexp(0.0, s)], axis=-1)


def _feature_samples(feature_law, n_samples, seed):
    if feature_law is None:
        return sample_ball(n_samples, FEATURE_BOUND, np.random.default_rng(seed))
    if callable(feature_law):
        return np.asarray(feature_law(n_samples, np.random.default_rng(seed)), dtype=float)
    return np.asarray(feature_law, dtype=float)


def excess_risk_bound(n: int, alpha: float = DEFAULT_ALPHA, B: float = FEATURE_BOUND, R: float = NORM_BOUND) -> float:
    """Rademacher excess-risk bound ``B R / sqrt(n) * (2 + sqrt(2 log(2 / alpha)))``."""
    if n < 1:
        raise ConfigurationError(f"sample count must be >= 1, got {n}")
    if not 0.0 < alpha < 1.0:
        raise ConfigurationError(f"alpha must lie in (0, 1), got {alpha}")
    return B * R / math.sqrt(n) * (2.0 + math.sqrt(2.0 * math.log(2.0 / alpha)))


@dataclass
class AmbiguityRadius:
    radius: float
    guarantee: float
    clipped: bool


def ambiguity_radius(excess: float, alpha: float = DEFAULT_ALPHA) -> AmbiguityRadius:
    """KL radius ``sqrt(r)`` on ``r in [0, 1]`` and its coverage level.

    Excess risks above 1 are clipped to 1 and flagged; the guarantee
    ``(1 - r / eta)(1 - alpha)`` is floored at zero.
    """
    if excess < 0:
        raise ConfigurationError(f"excess risk must be nonnegative, got {excess}")
    clipped = excess > 1.0
    r = min(excess, 1.0)
    eta = math.sqrt(r)
    if excess == 0.0:
        guarantee = 1.0 - alpha
    else:
        guarantee = max((1.0 - excess / eta) * (1.0 - alpha), 0.0)
    return AmbiguityRadius(eta, guarantee, clipped)


@dataclass
class LearnedModel:
    theta_hat: np.ndarray
    n: int
    alpha: float = DEFAULT_ALPHA
    norm_bound: float = NORM_BOUND
    feature_bound: float = FEATURE_BOUND
    excess_risk: float = field(init=False)
    ambiguity_radius: float = field(init=False)
    coverage_guarantee: float = field(init=False)
    flags: list = field(default_factory=list)

    def __post_init__(self):
        self.theta_hat = np.asarray(self.theta_hat, dtype=float)
        if np.linalg.norm(self.theta_hat) > self.norm_bound * (1 + 1e-9):
            raise ConfigurationError("theta_hat lies outside the norm ball")
        self.excess_risk = excess_risk_bound(self.n, self.alpha, self.feature_bound, self.norm_bound)
        amb = ambiguity_radius(self.excess_risk, self.alpha)
        self.ambiguity_radius = amb.radius
        self.coverage_guarantee = amb.guarantee
        if amb.clipped and "radius_clipped" not in self.flags:
            self.flags.append("radius_clipped")

    def predict_proba(self, X) -> np.ndarray:
        return true_conditional(X, self.theta_hat)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["theta_hat"] = [float(t) for t in self.theta_hat]
        return d

    def to_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def from_dict(cls, d: dict) -> "LearnedModel":
        return cls(np.asarray(d["theta_hat"], float), int(d["n"]), float(d.get("alpha", DEFAULT_ALPHA)),
                   float(d.get("norm_bound", NORM_BOUND)), float(d.get("feature_bound", FEATURE_BOUND)),
                   flags=list(d.get("flags", [])))

    @classmethod
    def from_json(cls, path: str | Path) -> "LearnedModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def fisher_information(theta, feature_law=None, n_samples: int = 200_000, seed: int = 0) -> np.ndarray:
    X = _feature_samples(feature_law, n_samples, seed)
    p = true_conditional(X, theta)[:, 1]
    w = p * (1.0 - p)
    return (X * w[:, None]).T @ X / len(X)


def asymptotic_erm_draw(n: int, theta_true, rng: np.random.Generator, R: float = NORM_BOUND,
                        information: np.ndarray | None = None) -> np.ndarray:
    """Draw an ERM estimate from its large-sample law, ``N(theta, I^-1 / n)`` projected on the R-ball.

    Used in place of an explicit fit when materializing ``n`` samples is
    impractical (``n`` of order 1e9).
    """
    theta_true = np.asarray(theta_true, dtype=float)
    info = fisher_information(theta_true) if information is None else information
    cov = np.linalg.inv(info) / n
    return project_ball(rng.multivariate_normal(theta_true, cov), R)


class NormBallLogisticRegression(ClassifierMixin, BaseEstimator):
    """Logistic regression restricted to ``||theta|| <= norm_bound`` with a KL ambiguity radius.

    Labels must be in ``{-1, +1}``; ``predict_proba`` columns follow
    ``classes_ == [-1, 1]`` (brake, track).  After fitting, ``excess_risk_``,
    ``ambiguity_radius_`` and ``coverage_guarantee_`` describe the PAC ball
    around the fitted conditional distribution.
    """

    def __init__(self, norm_bound=NORM_BOUND, feature_bound=FEATURE_BOUND, alpha=DEFAULT_ALPHA,
                 tol=1e-10, max_iter=10_000, method="newton"):
        self.norm_bound = norm_bound
        self.feature_bound = feature_bound
        self.alpha = alpha
        self.tol = tol
        self.max_iter = max_iter
        self.method = method

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=float)
        labels = np.unique(y)
        if not set(labels.tolist()) <= {-1.0, 1.0}:
            raise ValueError(f"labels must be -1 or +1, got {labels}")
        norms = np.linalg.norm(X, axis=1)
        self.feature_bound_violations_ = int(np.sum(norms > self.feature_bound * (1 + 1e-12)))
        res = erm_fit(Dataset(X, y), self.norm_bound, self.tol, self.max_iter, method=self.method)
        self.coef_ = res.theta
        self.converged_ = res.converged
        self.n_iter_ = res.iterations
        self.classes_ = np.array([-1, 1])
        self.n_features_in_ = X.shape[1]
        self.model_ = LearnedModel(res.theta, len(y), self.alpha, self.norm_bound, self.feature_bound)
        if not res.converged:
            self.model_.flags.append("erm_not_converged")
        self.excess_risk_ = self.model_.excess_risk
        self.ambiguity_radius_ = self.model_.ambiguity_radius
        self.coverage_guarantee_ = self.model_.coverage_guarantee
        return self

    def decision_function(self, X):
        check_is_fitted(self)
        X = check_array(X, dtype=float)
        return -(X @ self.coef_)

    def predict_proba(self, X):
        check_is_fitted(self)
        return true_conditional(check_array(X, dtype=float), self.coef_)

    def predict(self, X):
        return np.where(self.decision_function(X) > 0, 1, -1)
