"""Single-shooting tracking objective and its gradient."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cbf import Obstacle, obstacle_array
from .vehicle import PlannerConfig, rollout, rollout_vjp


@dataclass
class ProblemInstance:
    """Goal pose and obstacles expressed in the robot's local frame.

    The initial state is implicitly the origin ``(0, 0, 0)``.
    """

    x_go: np.ndarray
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))

    def __post_init__(self):
        self.x_go = np.asarray(self.x_go, dtype=float).reshape(3)
        self.obstacles = obstacle_array(self.obstacles)
        if not np.all(np.isfinite(self.x_go)) or not np.all(np.isfinite(self.obstacles)):
            raise ValueError("instance fields must be finite")

    @property
    def n_obs(self) -> int:
        return self.obstacles.shape[0]

    def obstacle_list(self) -> list[Obstacle]:
        return [Obstacle(*map(float, row)) for row in self.obstacles]

    def __eq__(self, other):
        if not isinstance(other, ProblemInstance):
            return NotImplemented
        return np.array_equal(self.x_go, other.x_go) and np.array_equal(self.obstacles, other.obstacles)


def stack_instances(instances) -> tuple[np.ndarray, np.ndarray]:
    """Batch arrays ``goals (B, 3)`` and ``obstacles (B, n_obs, 3)``."""
    instances = list(instances)
    if not instances:
        return np.zeros((0, 3)), np.zeros((0, 0, 3))
    counts = {inst.n_obs for inst in instances}
    if len(counts) != 1:
        raise ValueError(f"mixed obstacle counts in one batch: {sorted(counts)}")
    goals = np.stack([inst.x_go for inst in instances])
    obstacles = np.stack([inst.obstacles for inst in instances])
    return goals, obstacles


def objective_from_states(states, u, goal, cfg: PlannerConfig) -> np.ndarray:
    Q = np.asarray(cfg.Q)
    R = np.asarray(cfg.R)
    err = states[..., 1:, :] - np.asarray(goal, dtype=float)[..., None, :]
    return (err * err * Q).sum(axis=(-1, -2)) + (u * u * R).sum(axis=(-1, -2))


def objective_value(u, goal, cfg: PlannerConfig) -> np.ndarray:
    """Tracking cost over states ``x_1..x_N`` plus control effort.

    ``goal`` is a ``(..., 3)`` pose (or a :class:`ProblemInstance`).
    """
    if isinstance(goal, ProblemInstance):
        goal = goal.x_go
    u = np.asarray(u, dtype=float)
    return objective_from_states(rollout(u, cfg), u, goal, cfg)


def objective_grad_from_states(states, u, goal, cfg: PlannerConfig) -> np.ndarray:
    Q = np.asarray(cfg.Q)
    R = np.asarray(cfg.R)
    xbar = np.zeros(states.shape)
    xbar[..., 1:, :] = 2.0 * Q * (states[..., 1:, :] - np.asarray(goal, dtype=float)[..., None, :])
    return rollout_vjp(u, states, xbar, cfg) + 2.0 * R * u


def objective_gradient(u, goal, cfg: PlannerConfig) -> np.ndarray:
    """Gradient w.r.t. the controls, same shape as ``u`` (``(..., N, 2)``)."""
    if isinstance(goal, ProblemInstance):
        goal = goal.x_go
    u = np.asarray(u, dtype=float)
    return objective_grad_from_states(rollout(u, cfg), u, goal, cfg)
