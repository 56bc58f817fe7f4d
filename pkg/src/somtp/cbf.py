"""Discrete-time CBF residuals for circular obstacles and their derivatives.

Obstacles are arrays ``(..., n_obs, 3)`` of ``(Xo, Yo, Ro)``.  Residual
``(k, j)`` couples states ``x_k`` and ``x_{k+1}`` with obstacle ``j``; a
nonpositive value means the constraint holds.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .vehicle import PlannerConfig, rollout, rollout_jacobian, rollout_jacobian_vjp


@dataclass(frozen=True)
class Obstacle:
    Xo: float
    Yo: float
    Ro: float

    def __post_init__(self):
        if not self.Ro >= 0:
            raise ValueError("obstacle radius must be nonnegative")

    def as_array(self) -> np.ndarray:
        return np.array([self.Xo, self.Yo, self.Ro], dtype=float)


def obstacle_array(obstacles) -> np.ndarray:
    """Coerce a list of :class:`Obstacle` (or rows) into an ``(n_obs, 3)`` array.

    Arrays pass through unchanged apart from dtype, so batched ``(B, n_obs, 3)``
    inputs are accepted as well.
    """
    if isinstance(obstacles, np.ndarray):
        return obstacles.astype(float).reshape(-1, 3) if obstacles.ndim <= 1 else obstacles.astype(float)
    rows = [o.as_array() if isinstance(o, Obstacle) else np.asarray(o, dtype=float) for o in obstacles]
    return np.array(rows, dtype=float).reshape(len(rows), 3)


def h_value(x, obstacles, cfg: PlannerConfig) -> np.ndarray:
    """Barrier value of states ``(..., S, 3)`` against obstacles ``(..., n_obs, 3)``.

    Broadcasts to ``(..., S, n_obs)``.  Passing a single state and a single
    obstacle row also works and yields a scalar.
    """
    x = np.asarray(x, dtype=float)
    o = np.asarray(obstacles, dtype=float)
    if x.ndim == 1 and o.ndim == 1:
        return (x[0] - o[0]) ** 2 + (x[1] - o[1]) ** 2 - (o[2] + cfg.inflation) ** 2
    dx = x[..., :, None, 0] - o[..., None, :, 0]
    dy = x[..., :, None, 1] - o[..., None, :, 1]
    return dx * dx + dy * dy - (o[..., None, :, 2] + cfg.inflation) ** 2


def cbf_residual(x_k, x_next, obstacle, cfg: PlannerConfig) -> float:
    hk = h_value(x_k, obstacle, cfg)
    hn = h_value(x_next, obstacle, cfg)
    return -(hn - hk) - cfg.gamma_cbf * hk


def residuals_from_states(states, obstacles, cfg: PlannerConfig) -> np.ndarray:
    H = h_value(states, obstacles, cfg)
    return -(H[..., 1:, :] - H[..., :-1, :]) - cfg.gamma_cbf * H[..., :-1, :]


def all_residuals(u, obstacles, cfg: PlannerConfig) -> np.ndarray:
    """``(..., N, n_obs)`` residual matrix of a control sequence."""
    return residuals_from_states(rollout(u, cfg), obstacle_array(obstacles), cfg)


def _h_grad(states, obstacles):
    # dH/dx per (state, obstacle): (..., S, n_obs, 3); heading column is zero
    g = np.zeros(states.shape[:-1] + (obstacles.shape[-2], 3))
    g[..., 0] = 2.0 * (states[..., :, None, 0] - obstacles[..., None, :, 0])
    g[..., 1] = 2.0 * (states[..., :, None, 1] - obstacles[..., None, :, 1])
    return g


@dataclass
class Linearization:
    """Residuals and their control gradients at ``base_u``.

    ``residual_grads`` has shape ``(..., N, n_obs, N, 2)``.  ``states`` and
    ``jac`` are kept so second-order reverse passes can reuse them.
    """

    base_u: np.ndarray
    residuals: np.ndarray
    residual_grads: np.ndarray
    states: np.ndarray
    jac: np.ndarray
    obstacles: np.ndarray

    @property
    def flat_grads(self) -> np.ndarray:
        g = self.residual_grads
        n, m = g.shape[-4], g.shape[-3]
        return g.reshape(g.shape[:-4] + (n * m, 2 * n))


def linearize(u, obstacles, cfg: PlannerConfig) -> Linearization:
    u = np.asarray(u, dtype=float)
    obstacles = obstacle_array(obstacles)
    states = rollout(u, cfg)
    J = rollout_jacobian(u, cfg, states)
    r = residuals_from_states(states, obstacles, cfg)
    dH = np.einsum("...sja,...saic->...sjic", _h_grad(states, obstacles), J)
    G = -dH[..., 1:, :, :, :] + (1.0 - cfg.gamma_cbf) * dH[..., :-1, :, :, :]
    return Linearization(u, r, G, states, J, obstacles)


def residual_gradients(u, obstacles, cfg: PlannerConfig) -> np.ndarray:
    """Gradient rows of every residual w.r.t. the flattened controls, ``(N*n_obs, 2N)``."""
    return linearize(u, obstacle_array(obstacles), cfg).flat_grads


def linearization_vjp(lin: Linearization, rbar, Gbar, cfg: PlannerConfig) -> np.ndarray:
    """Cotangent on ``base_u`` from cotangents on the residuals and on their gradients.

    ``rbar`` is ``(..., N, n_obs)`` and ``Gbar`` is ``(..., N, n_obs, N, 2)``;
    either may be ``None``.
    """
    u, states, J, obs = lin.base_u, lin.states, lin.jac, lin.obstacles
    n = u.shape[-2]
    g = 1.0 - cfg.gamma_cbf
    xbar = np.zeros(states.shape)
    Jbar = np.zeros(J.shape)
    ubar = np.zeros(u.shape)
    if rbar is not None:
        ubar += np.einsum("...kj,...kjic->...ic", rbar, lin.residual_grads)
    if Gbar is not None:
        dHbar = np.zeros(states.shape[:-1] + (obs.shape[-2], n, 2))
        dHbar[..., 1:, :, :, :] -= Gbar
        dHbar[..., :-1, :, :, :] += g * Gbar
        hg = _h_grad(states, obs)
        Jbar += np.einsum("...sja,...sjic->...saic", hg, dHbar)
        hgbar = np.einsum("...sjic,...saic->...sja", dHbar, J)
        xbar[..., 0] += 2.0 * hgbar[..., 0].sum(axis=-1)
        xbar[..., 1] += 2.0 * hgbar[..., 1].sum(axis=-1)
        ubar += rollout_jacobian_vjp(u, states, J, Jbar, xbar, cfg)
    return ubar


def violation_stats(residuals) -> tuple[float, float]:
    """``(sum of positive parts, max(0, max entry))``; zero for an empty matrix."""
    r = np.asarray(residuals, dtype=float)
    if r.size == 0:
        return 0.0, 0.0
    return float(np.maximum(r, 0.0).sum()), float(max(0.0, r.max()))


def residual_state_vjp(states, obstacles, rbar, cfg: PlannerConfig) -> np.ndarray:
    """State cotangent ``(..., N+1, 3)`` produced by a residual cotangent ``(..., N, n_obs)``."""
    w = np.zeros(states.shape[:-1] + (rbar.shape[-1],))
    w[..., 1:, :] -= rbar
    w[..., :-1, :] += (1.0 - cfg.gamma_cbf) * rbar
    return np.einsum("...sj,...sja->...sa", w, _h_grad(states, obstacles))
