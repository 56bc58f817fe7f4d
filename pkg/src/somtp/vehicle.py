"""Discrete-time kinematic bicycle model with single-shooting rollout.

Arrays follow a batch-first convention: a state is ``(..., 3)`` holding
``(X, Y, phi)``, a control is ``(..., 2)`` holding ``(v, q)`` and a control
sequence is ``(..., N, 2)``.  Every function accepts arbitrary leading batch
dimensions.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class PlannerConfig:
    N: int = 20
    dt: float = 0.1
    L: float = 0.5
    Q: tuple[float, float, float] = (2.0, 2.0, 1.0)
    R: tuple[float, float] = (1.0, 1.5)
    gamma_cbf: float = 0.5
    R_robot: float = 0.3
    l_ex: float = 0.1
    u_min: tuple[float, float] = (-1.0, -0.6)
    u_max: tuple[float, float] = (1.0, 0.6)

    def __post_init__(self):
        object.__setattr__(self, "Q", tuple(float(q) for q in self.Q))
        object.__setattr__(self, "R", tuple(float(r) for r in self.R))
        object.__setattr__(self, "u_min", tuple(float(v) for v in self.u_min))
        object.__setattr__(self, "u_max", tuple(float(v) for v in self.u_max))
        if int(self.N) < 1:
            raise ValueError("N must be >= 1")
        if not self.dt > 0 or not self.L > 0:
            raise ValueError("dt and L must be positive")
        if len(self.Q) != 3 or len(self.R) != 2:
            raise ValueError("Q needs 3 entries and R needs 2")
        if min(self.Q) < 0 or min(self.R) < 0:
            raise ValueError("Q and R entries must be nonnegative")
        if not 0 < self.gamma_cbf <= 1:
            raise ValueError("gamma_cbf must lie in (0, 1]")
        if any(lo >= hi for lo, hi in zip(self.u_min, self.u_max)):
            raise ValueError("u_min must be strictly below u_max")

    @property
    def inflation(self) -> float:
        """Robot radius plus expansion length, added to every obstacle radius."""
        return self.R_robot + self.l_ex

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.u_min, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.u_max, dtype=float)

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "PlannerConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def replace(self, **kw) -> "PlannerConfig":
        return dataclasses.replace(self, **kw)


def step(x, u, cfg: PlannerConfig) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    X, Y, phi = x[..., 0], x[..., 1], x[..., 2]
    v, q = u[..., 0], u[..., 1]
    dt = cfg.dt
    return np.stack(
        [X + v * np.cos(phi) * dt, Y + v * np.sin(phi) * dt, phi + v * np.tan(q) / cfg.L * dt],
        axis=-1,
    )


def rollout(u, cfg: PlannerConfig, x0=None) -> np.ndarray:
    """Iterate :func:`step` from ``x0`` (the local-frame origin by default).

    Returns the ``(..., N+1, 3)`` trajectory including the initial state.
    """
    u = np.asarray(u, dtype=float)
    n = u.shape[-2]
    states = np.zeros(u.shape[:-2] + (n + 1, 3))
    if x0 is not None:
        states[..., 0, :] = x0
    for k in range(n):
        states[..., k + 1, :] = step(states[..., k, :], u[..., k, :], cfg)
    return states


def _check_steer(q):
    if np.any(np.abs(q) >= np.pi / 2):
        raise ValueError("steering angle must satisfy |q| < pi/2 for finite Jacobians")


def step_jacobians(x, u, cfg: PlannerConfig) -> tuple[np.ndarray, np.ndarray]:
    """Analytic partials ``A = df/dx`` (3x3) and ``B = df/du`` (3x2)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    phi = x[..., 2]
    v, q = u[..., 0], u[..., 1]
    _check_steer(q)
    dt, L = cfg.dt, cfg.L
    c, s = np.cos(phi), np.sin(phi)
    cq = np.cos(q)
    batch = np.broadcast_shapes(phi.shape, v.shape)
    A = np.zeros(batch + (3, 3))
    A[..., 0, 0] = A[..., 1, 1] = A[..., 2, 2] = 1.0
    A[..., 0, 2] = -v * s * dt
    A[..., 1, 2] = v * c * dt
    B = np.zeros(batch + (3, 2))
    B[..., 0, 0] = c * dt
    B[..., 1, 0] = s * dt
    B[..., 2, 0] = np.tan(q) / L * dt
    B[..., 2, 1] = v * dt / (L * cq * cq)
    return A, B


def rollout_jacobian(u, cfg: PlannerConfig, states=None) -> np.ndarray:
    """Sensitivities ``J[..., k, :, i, :] = d x_k / d u_i`` of the rollout.

    Shape ``(..., N+1, 3, N, 2)``; blocks with ``i >= k`` are exactly zero.
    """
    u = np.asarray(u, dtype=float)
    if states is None:
        states = rollout(u, cfg)
    n = u.shape[-2]
    A, B = step_jacobians(states[..., :-1, :], u, cfg)
    J = np.zeros(u.shape[:-2] + (n + 1, 3, n, 2))
    for k in range(n):
        if k > 0:
            J[..., k + 1, :, :k, :] = np.einsum("...ab,...bic->...aic", A[..., k, :, :], J[..., k, :, :k, :])
        J[..., k + 1, :, k, :] = B[..., k, :, :]
    return J


def rollout_vjp(u, states, xbar, cfg: PlannerConfig) -> np.ndarray:
    """Adjoint of :func:`rollout`: map a state cotangent ``(..., N+1, 3)`` to ``(..., N, 2)``."""
    u = np.asarray(u, dtype=float)
    A, B = step_jacobians(states[..., :-1, :], u, cfg)
    n = u.shape[-2]
    lam = np.array(xbar[..., n, :], dtype=float)
    ubar = np.zeros_like(u)
    for k in range(n - 1, -1, -1):
        ubar[..., k, :] = np.einsum("...ab,...a->...b", B[..., k, :, :], lam)
        lam = xbar[..., k, :] + np.einsum("...ab,...a->...b", A[..., k, :, :], lam)
    return ubar


def rollout_jacobian_vjp(u, states, J, Jbar, xbar, cfg: PlannerConfig) -> np.ndarray:
    """Reverse-mode derivative through both the rollout and its sensitivities.

    Given cotangents ``Jbar`` for :func:`rollout_jacobian` output and ``xbar``
    for the states, returns the total cotangent on ``u``.  This supplies the
    second-order terms needed to differentiate through linearization-based
    corrections.
    """
    u = np.asarray(u, dtype=float)
    n = u.shape[-2]
    dt, L = cfg.dt, cfg.L
    A, B = step_jacobians(states[..., :-1, :], u, cfg)
    phi = states[..., :-1, 2]
    v, q = u[..., 0], u[..., 1]
    c, s = np.cos(phi), np.sin(phi)
    cq = np.cos(q)
    sec2 = 1.0 / (cq * cq)

    Jbar = np.array(Jbar, dtype=float)
    xb = np.array(xbar, dtype=float)
    ubar = np.zeros_like(u)
    for k in range(n - 1, -1, -1):
        Jb_next = Jbar[..., k + 1, :, :, :]
        # J_{k+1} = A_k J_k + B_k E_k
        Abar = np.einsum("...aic,...bic->...ab", Jb_next, J[..., k, :, :, :])
        Bbar = Jb_next[..., :, k, :]
        Jbar[..., k, :, :, :] += np.einsum("...ab,...aic->...bic", A[..., k, :, :], Jb_next)

        vk, ck, sk = v[..., k], c[..., k], s[..., k]
        xb[..., k, 2] += (
            Abar[..., 0, 2] * (-vk * ck * dt)
            + Abar[..., 1, 2] * (-vk * sk * dt)
            + Bbar[..., 0, 0] * (-sk * dt)
            + Bbar[..., 1, 0] * (ck * dt)
        )
        ubar[..., k, 0] += (
            Abar[..., 0, 2] * (-sk * dt) + Abar[..., 1, 2] * (ck * dt) + Bbar[..., 2, 1] * (dt / L * sec2[..., k])
        )
        ubar[..., k, 1] += Bbar[..., 2, 0] * (dt / L * sec2[..., k]) + Bbar[..., 2, 1] * (
            2.0 * vk * dt / L * sec2[..., k] * np.tan(q[..., k])
        )

        # x_{k+1} = f(x_k, u_k)
        lam = xb[..., k + 1, :]
        ubar[..., k, :] += np.einsum("...ab,...a->...b", B[..., k, :, :], lam)
        xb[..., k, :] += np.einsum("...ab,...a->...b", A[..., k, :, :], lam)
    return ubar


def rollout_hessian(u, cfg: PlannerConfig, states=None, J=None) -> np.ndarray:
    """Second derivatives ``T[..., k, a, p, r] = d^2 x_{k,a} / du_p du_r`` over flattened controls.

    Shape ``(..., N+1, 3, 2N, 2N)``; built by a forward second-order recursion.
    """
    u = np.asarray(u, dtype=float)
    if states is None:
        states = rollout(u, cfg)
    if J is None:
        J = rollout_jacobian(u, cfg, states)
    n = u.shape[-2]
    P = 2 * n
    dt, L = cfg.dt, cfg.L
    A, _ = step_jacobians(states[..., :-1, :], u, cfg)
    Jf = J.reshape(J.shape[:-2] + (P,))
    T = np.zeros(u.shape[:-2] + (n + 1, 3, P, P))
    for k in range(n):
        phi = states[..., k, 2]
        v, q = u[..., k, 0], u[..., k, 1]
        c, s = np.cos(phi), np.sin(phi)
        sec2 = 1.0 / np.cos(q) ** 2
        T[..., k + 1, :, :, :] = np.einsum("...ab,...bpr->...apr", A[..., k, :, :], T[..., k, :, :, :])
        dphi = Jf[..., k, 2, :]
        pp = dphi[..., :, None] * dphi[..., None, :]
        T[..., k + 1, 0, :, :] += (-v * c * dt)[..., None, None] * pp
        T[..., k + 1, 1, :, :] += (-v * s * dt)[..., None, None] * pp
        iv, iq = 2 * k, 2 * k + 1
        for a, coef in ((0, -s * dt), (1, c * dt)):
            cross = coef[..., None] * dphi
            T[..., k + 1, a, :, iv] += cross
            T[..., k + 1, a, iv, :] += cross
        cvq = dt / L * sec2
        T[..., k + 1, 2, iv, iq] += cvq
        T[..., k + 1, 2, iq, iv] += cvq
        T[..., k + 1, 2, iq, iq] += 2.0 * v * dt / L * sec2 * np.tan(q)
    return T
