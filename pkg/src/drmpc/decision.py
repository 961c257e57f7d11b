"""Ground-truth human decision model and training-data generation.

Labels follow ``+1 -> track`` and ``-1 -> brake``.  The link function is the
*decreasing* logistic ``sigma(z) = 1 / (1 + exp(z))`` so that
``P(y | x) = sigma(y * <x, theta>)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy.special import expit

from .tree import ConfigurationError

THETA_TRUE = np.array([3.0, 3.0])
FEATURE_BOUND = float(np.sqrt(18.0))


def sigma(z):
    """Decreasing logistic link, ``1 / (1 + exp(z))``."""
    return expit(-np.asarray(z, dtype=float))


def features(p_ego, v_ego, p_human, v_human, v_floor: float = 0.1):
    """Negated signed time-to-crossing of each agent, stacked on the last axis.

    Velocities are smoothed as ``sqrt(v**2 + v_floor**2)``.  Works elementwise on
    numpy arrays and on the forward-mode types in :mod:`drmpc.ad`.
    """
    f_ego = -p_ego / np.sqrt(v_ego * v_ego + v_floor**2)
    f_human = -p_human / np.sqrt(v_human * v_human + v_floor**2)
    return f_ego, f_human


def feature_matrix(p_ego, v_ego, p_human, v_human, v_floor: float = 0.1) -> np.ndarray:
    return np.stack(features(np.asarray(p_ego, float), np.asarray(v_ego, float),
                             np.asarray(p_human, float), np.asarray(v_human, float), v_floor), axis=-1)


def true_conditional(x, theta) -> np.ndarray:
    """``[P(y=-1|x), P(y=+1|x)]`` on the last axis, i.e. ``[brake, track]``."""
    score = np.asarray(x, dtype=float) @ np.asarray(theta, dtype=float)
    p_track = sigma(score)
    p_brake = sigma(-score)
    return np.stack([p_brake, p_track], axis=-1)


@dataclass
class Dataset:
    X: np.ndarray
    y: np.ndarray
    seed: int | None = None

    def __len__(self) -> int:
        return len(self.y)

    def to_csv(self, path: str | Path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["x1", "x2", "y"])
            for (x1, x2), y in zip(self.X, self.y):
                writer.writerow([repr(float(x1)), repr(float(x2)), int(y)])

    @classmethod
    def from_csv(cls, path: str | Path) -> "Dataset":
        with open(path, newline="") as fh:
            reader = csv.DictReader(fh)
            rows = [(float(r["x1"]), float(r["x2"]), int(r["y"])) for r in reader]
        if not rows:
            raise ConfigurationError(f"{path}: dataset is empty")
        arr = np.array(rows)
        return cls(arr[:, :2], arr[:, 2].astype(int))


def sample_ball(n: int, radius: float, rng: np.random.Generator, dim: int = 2) -> np.ndarray:
    """Uniform draws from the Euclidean ball of the given radius."""
    direction = rng.standard_normal((n, dim))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    r = radius * rng.random(n) ** (1.0 / dim)
    return direction * r[:, None]


def sample_labels(X: np.ndarray, theta, rng: np.random.Generator) -> np.ndarray:
    p_track = true_conditional(X, theta)[:, 1]
    return np.where(rng.random(len(X)) < p_track, 1, -1)


def sample_dataset(n: int, theta=THETA_TRUE, B: float = FEATURE_BOUND, seed: int | None = None) -> Dataset:
    if n < 1:
        raise ConfigurationError(f"dataset size must be >= 1, got {n}")
    if not B > 0:
        raise ConfigurationError(f"feature bound must be positive, got {B}")
    rng = np.random.default_rng(seed)
    X = sample_ball(int(n), B, rng)
    return Dataset(X, sample_labels(X, theta, rng), seed)
