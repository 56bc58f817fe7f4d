"""Safety correction by sequential linearization, quadratic penalty and
projected gradient descent with an Armijo-box line search (SLPG), plus the
fixed-step gradient correction used by the DC3 baseline.

Both corrections run batched over ``(B, N, 2)`` control arrays and can record a
tape so that training can backpropagate through the unrolled iterations.
Accepted line-search step sizes are treated as constants in the reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cbf import Linearization, all_residuals, linearization_vjp, linearize, obstacle_array
from .vehicle import PlannerConfig


@dataclass(frozen=True)
class SlpgConfig:
    n_m: int = 10
    i_m: int = 2
    lambda_c: float = 10.0
    armijo_c1: float = 1e-4
    armijo_shrink: float = 0.5
    armijo_max_iters: int = 10
    break_tol: float = 1e-6
    step0: float = 1.0

    def __post_init__(self):
        if self.n_m < 1 or self.i_m < 1:
            raise ValueError("n_m and i_m must be >= 1")
        if not self.lambda_c > 0:
            raise ValueError("lambda_c must be positive")
        if not 0 < self.armijo_shrink < 1:
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if self.armijo_max_iters < 1:
            raise ValueError("armijo_max_iters must be >= 1")
        if self.break_tol < 0:
            raise ValueError("break_tol must be nonnegative")


def _max_violation(u, obstacles, cfg):
    r = all_residuals(u, obstacles, cfg)
    if r.shape[-1] == 0:
        return np.zeros(u.shape[0])
    return np.maximum(r, 0.0).max(axis=(-1, -2))


def _box(cfg, n):
    return np.tile(cfg.lo, n), np.tile(cfg.hi, n), np.tile(np.asarray(cfg.R, dtype=float), n)


def j_corr(du, lin: Linearization, cfg: PlannerConfig, scfg: SlpgConfig) -> float:
    """Penalized correction cost of a step ``du`` under a frozen linearization."""
    du = np.asarray(du, dtype=float).reshape(-1)
    n = lin.base_u.shape[-2]
    Rf = np.tile(np.asarray(cfg.R, dtype=float), n)
    z = lin.residuals.reshape(-1) + lin.flat_grads @ du
    return float((Rf * du * du).sum() + scfg.lambda_c * (np.maximum(z, 0.0) ** 2).sum())


def _line_search(du, d, z, Gd, u_base, lo, hi, Rf, scfg):
    # Evaluate the whole backtracking sequence at once; pick the first candidate
    # meeting Armijo and the box, else the last one tried.
    ts = scfg.step0 * scfg.armijo_shrink ** np.arange(scfg.armijo_max_iters)
    cand = du[:, None, :] - ts[None, :, None] * d[:, None, :]
    zt = z[:, None, :] - ts[None, :, None] * Gd[:, None, :]
    J0 = (Rf * du * du).sum(-1) + scfg.lambda_c * (np.maximum(z, 0.0) ** 2).sum(-1)
    Jt = (Rf * cand * cand).sum(-1) + scfg.lambda_c * (np.maximum(zt, 0.0) ** 2).sum(-1)
    armijo = Jt <= J0[:, None] - scfg.armijo_c1 * ts[None, :] * (d * d).sum(-1)[:, None]
    moved = u_base[:, None, :] + cand
    inbox = np.all((moved >= lo) & (moved <= hi), axis=-1)
    ok = armijo & inbox
    ok[:, -1] = True
    return ts[np.argmax(ok, axis=1)]


def armijo_box_search(du, direction, lin: Linearization, u_base, cfg: PlannerConfig, scfg: SlpgConfig) -> float:
    """Step size for ``du - step * direction`` under the Armijo-box rule."""
    du = np.asarray(du, dtype=float).reshape(1, -1)
    d = np.asarray(direction, dtype=float).reshape(1, -1)
    n = lin.base_u.shape[-2]
    lo, hi, Rf = _box(cfg, n)
    G = lin.flat_grads
    z = lin.residuals.reshape(1, -1) + (G @ du[0])[None, :]
    Gd = (G @ d[0])[None, :]
    return float(_line_search(du, d, z, Gd, np.asarray(u_base, dtype=float).reshape(1, -1), lo, hi, Rf, scfg)[0])


@dataclass
class _Inner:
    du: np.ndarray
    z: np.ndarray
    p: np.ndarray
    step: np.ndarray
    mask: np.ndarray
    free: np.ndarray


@dataclass
class _Outer:
    idx: np.ndarray
    lin: Linearization
    inner: list = field(default_factory=list)


@dataclass
class CorrectionResult:
    u_hat: np.ndarray
    du: np.ndarray
    steps: list
    tape: list | None = None


def slpg_batch(u, obstacles, cfg: PlannerConfig, scfg: SlpgConfig, record=False, steps=None) -> CorrectionResult:
    """Run the correction on a batch ``u (B, N, 2)`` with obstacles ``(B, n_obs, 3)``.

    ``steps`` replays a previous run's accepted step sizes (one array per
    outer/inner iteration) instead of searching; the reverse pass treats step
    sizes as constants, so replay is what finite-difference checks compare to.
    """
    u = np.asarray(u, dtype=float)
    obstacles = np.asarray(obstacles, dtype=float)
    B, n = u.shape[0], u.shape[-2]
    P = 2 * n
    lo, hi, Rf = _box(cfg, n)
    un = u.reshape(B, P).copy()
    tape = [] if record else None
    used = []
    active = _max_violation(u, obstacles, cfg) > scfg.break_tol
    for outer in range(scfg.n_m):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        base = un[idx]
        lin = linearize(base.reshape(-1, n, 2), obstacles[idx], cfg)
        G = lin.flat_grads
        r0 = lin.residuals.reshape(idx.size, -1)
        rec = _Outer(idx, lin)
        du = np.zeros_like(base)
        outer_steps = []
        for i in range(scfg.i_m):
            z = r0 + np.einsum("bmp,bp->bm", G, du)
            p = np.maximum(z, 0.0)
            d = 2.0 * Rf * du + 2.0 * scfg.lambda_c * np.einsum("bmp,bm->bp", G, p)
            # coordinates held at a bound by the clamp leave the direction, so the
            # box test in the line search only judges coordinates that can move
            x = base + du
            free = ~(((x <= lo) & (d > 0)) | ((x >= hi) & (d < 0)))
            d = d * free
            if steps is not None:
                t = np.asarray(steps[outer][i], dtype=float)
            else:
                Gd = np.einsum("bmp,bp->bm", G, d)
                t = _line_search(du, d, z, Gd, base, lo, hi, Rf, scfg)
            w = base + du - t[:, None] * d
            c = np.clip(w, lo, hi)
            if record:
                rec.inner.append(_Inner(du, z, p, t, (w >= lo) & (w <= hi), free))
            outer_steps.append(t)
            du = c - base
        # the new iterate is the clamped point itself, so the box holds exactly
        un[idx] = c
        used.append(outer_steps)
        if record:
            tape.append(rec)
        active[idx] = _max_violation(c.reshape(-1, n, 2), obstacles[idx], cfg) > scfg.break_tol
    u_hat = un.reshape(u.shape)
    return CorrectionResult(u_hat, u_hat - u, used, tape)


def slpg_backward(result: CorrectionResult, ubar_hat, cfg: PlannerConfig, scfg: SlpgConfig) -> np.ndarray:
    """Pull a cotangent on ``u_hat`` back to the uncorrected controls."""
    if result.tape is None:
        raise ValueError("correction was run without record=True")
    shape = result.u_hat.shape
    B, n = shape[0], shape[-2]
    P = 2 * n
    Rf = np.tile(np.asarray(cfg.R, dtype=float), n)
    lam = scfg.lambda_c
    ub = np.asarray(ubar_hat, dtype=float).reshape(B, P).copy()
    for rec in reversed(result.tape):
        G = rec.lin.flat_grads
        b, M = G.shape[0], G.shape[1]
        base_bar = np.zeros((b, P))
        Gbar = np.zeros((b, M, P))
        r0bar = np.zeros((b, M))
        du_bar = ub[rec.idx]
        last = len(rec.inner) - 1
        for i in range(last, -1, -1):
            it = rec.inner[i]
            c_bar = du_bar
            if i != last:
                base_bar -= du_bar
            w_bar = c_bar * it.mask
            base_bar += w_bar
            d_bar = -it.step[:, None] * w_bar * it.free
            du_bar = w_bar + 2.0 * Rf * d_bar
            p_bar = 2.0 * lam * np.einsum("bmp,bp->bm", G, d_bar)
            Gbar += 2.0 * lam * it.p[:, :, None] * d_bar[:, None, :]
            z_bar = p_bar * (it.z > 0)
            r0bar += z_bar
            Gbar += z_bar[:, :, None] * it.du[:, None, :]
            du_bar = du_bar + np.einsum("bmp,bm->bp", G, z_bar)
        nobs = rec.lin.residuals.shape[-1]
        base_bar += linearization_vjp(
            rec.lin, r0bar.reshape(b, n, nobs), Gbar.reshape(b, n, nobs, n, 2), cfg
        ).reshape(b, P)
        ub[rec.idx] = base_bar
    return ub.reshape(shape)


def correct(u, inst, cfg: PlannerConfig, scfg: SlpgConfig) -> tuple[np.ndarray, np.ndarray]:
    """Correct one control sequence ``(N, 2)``; returns ``(u_hat, du)``."""
    u = np.asarray(u, dtype=float)
    obs = obstacle_array(inst.obstacles)
    res = slpg_batch(u[None], obs[None], cfg, scfg)
    return res.u_hat[0], res.du[0]


@dataclass
class Dc3Tape:
    lins: list
    u_hat: np.ndarray


def dc3_batch(u, obstacles, cfg: PlannerConfig, gamma_d: float, steps: int, record=False):
    """Repeated fixed-step descent on the summed squared violations (no box projection)."""
    u = np.asarray(u, dtype=float).copy()
    obstacles = np.asarray(obstacles, dtype=float)
    lins = []
    for _ in range(steps):
        lin = linearize(u, obstacles, cfg)
        p = np.maximum(lin.residuals, 0.0)
        u = u - gamma_d * 2.0 * np.einsum("...kj,...kjic->...ic", p, lin.residual_grads)
        if record:
            lins.append(lin)
    return (u, Dc3Tape(lins, u)) if record else u


def dc3_backward(tape: Dc3Tape, ubar_hat, cfg: PlannerConfig, gamma_d: float) -> np.ndarray:
    ub = np.asarray(ubar_hat, dtype=float).copy()
    for lin in reversed(tape.lins):
        r = lin.residuals
        p = np.maximum(r, 0.0)
        p_bar = -2.0 * gamma_d * np.einsum("...kjic,...ic->...kj", lin.residual_grads, ub)
        Gbar = -2.0 * gamma_d * p[..., None, None] * ub[..., None, None, :, :]
        ub = ub + linearization_vjp(lin, p_bar * (r > 0), Gbar, cfg)
    return ub


def dc3_correct(u, inst, cfg: PlannerConfig, gamma_d: float = 1e-3, steps: int = 5) -> np.ndarray:
    u = np.asarray(u, dtype=float)
    return dc3_batch(u[None], obstacle_array(inst.obstacles)[None], cfg, gamma_d, steps)[0]
