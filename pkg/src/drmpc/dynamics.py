"""Road-crossing agent models: double integrators, human control laws, geometry."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tree import ConfigurationError, ScenarioTree

KMH = 1.0 / 3.6

BRAKE = 0
TRACK = 1
DECISIONS = ("brake", "track")

# human control-law constants
MAX_DECEL = 5.0
TRACK_ACCEL = 2.0
IDM_EXPONENT = 4
STOP_LINE = -2.5
MIN_STOP_GAP = 0.5
BRAKE_LAWS = ("full", "stop_line")


@dataclass(frozen=True)
class AgentState:
    position: float
    velocity: float

    def as_array(self) -> np.ndarray:
        return np.array([self.position, self.velocity])


@dataclass(frozen=True)
class WorldParams:
    """Shared scenario parameters (SI units)."""

    dt: float = 1.0
    agent_radius: float = 1.0
    v_ref: float = 20.0 * KMH
    v_min: float = 0.0
    v_max: float = 23.0 * KMH
    a_min: float = -5.0
    a_max: float = 5.0
    q_velocity: float = 0.1
    p_velocity: float = 0.1
    r_accel: float = 10.0
    v_floor: float = 0.1
    brake_law: str = "full"

    def __post_init__(self):
        if not self.dt > 0:
            raise ConfigurationError(f"dt must be positive, got {self.dt}")
        if self.agent_radius < 0:
            raise ConfigurationError("agent_radius must be nonnegative")
        if not (self.v_min <= self.v_max and self.a_min <= self.a_max):
            raise ConfigurationError("empty ego state or control box")
        if self.brake_law not in BRAKE_LAWS:
            raise ConfigurationError(f"unknown brake law {self.brake_law!r}")

    @property
    def d_safe(self) -> float:
        return 2.0 * self.agent_radius + 1.0


def step_agent(state: AgentState, accel: float, dt: float) -> AgentState:
    return AgentState(state.position + state.velocity * dt, state.velocity + accel * dt)


def kappa(state: AgentState, decision: int | str, dt: float = 1.0, v_ref: float = 20.0 * KMH,
          brake_law: str = "full") -> float:
    """Human acceleration for a decision (``"brake"``/``0`` or ``"track"``/``1``).

    ``brake_law="full"`` decelerates at 5 m/s^2 until standstill.  ``"stop_line"``
    brakes just hard enough to stop at ``p = -2.5`` and switches to the full law
    past it.  Tracking follows the free-road Intelligent Driver Model term
    ``a_n (1 - (v / v_ref)^4)``.
    """
    if isinstance(decision, str):
        decision = DECISIONS.index(decision)
    v = state.velocity
    if decision == BRAKE:
        if brake_law == "stop_line" and state.position < STOP_LINE:
            gap = max(STOP_LINE - state.position, MIN_STOP_GAP)
            return min(max(-v * v / (2.0 * gap), -MAX_DECEL), 0.0)
        # never reverses within a step
        return min(max(-v / dt, -MAX_DECEL), 0.0)
    if decision == TRACK:
        a = TRACK_ACCEL * (1.0 - (v / v_ref) ** IDM_EXPONENT)
        return min(max(a, -MAX_DECEL), MAX_DECEL)
    raise ValueError(f"unknown decision {decision!r}")


def rollout_human(initial: AgentState, tree: ScenarioTree, params: WorldParams) -> np.ndarray:
    """Human states for every node as an ``(node_count, 2)`` array of ``[p, v]``.

    Only the human block of the joint dynamics is rolled out: the control law
    depends on the human state alone, so the result does not depend on the ego
    plan.
    """
    if tree.branching != len(DECISIONS):
        raise ConfigurationError("road-crossing human model has exactly two decisions")
    states = np.empty((tree.node_count, 2))
    states[0] = initial.position, initial.velocity
    for node in range(1, tree.node_count):
        par = AgentState(*states[tree.parent[node]])
        a = kappa(par, int(tree.decision[node]), params.dt, params.v_ref, params.brake_law)
        nxt = step_agent(par, a, params.dt)
        states[node] = nxt.position, max(nxt.velocity, 0.0)
    return states


def distance(ego: AgentState, human: AgentState) -> float:
    """Euclidean distance for perpendicular roads meeting at the origin."""
    return math.hypot(ego.position, human.position)


def collision_margin(ego: AgentState, human: AgentState, params: WorldParams) -> float:
    """``d_safe - distance``; negative values are safe."""
    return params.d_safe - distance(ego, human)
