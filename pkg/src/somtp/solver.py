"""Reference optimizer for the transcribed planning problem.

Augmented Lagrangian outer iterations over the CBF residuals; each subproblem
is solved by a projected Newton method on the control box (clamped trial
points, Armijo backtracking along the projection arc).  Instances and restarts
are stacked into one batch so the whole oracle runs vectorized.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cbf import _h_grad, linearize, residuals_from_states
from .objective import ProblemInstance, objective_from_states, objective_grad_from_states, stack_instances
from .vehicle import PlannerConfig, rollout, rollout_hessian


@dataclass(frozen=True)
class SolverConfig:
    max_outer: int = 30
    max_inner: int = 200
    inner_tol: float = 1e-8
    feas_tol: float = 1e-6
    mu0: float = 1.0
    eps: float = 4.0
    mu_max: float = 1e8
    restarts: int = 3
    seed: int = 0
    armijo_c1: float = 1e-4
    max_backtracks: int = 30

    def __post_init__(self):
        if self.max_outer < 1 or self.max_inner < 1 or self.restarts < 1:
            raise ValueError("iteration counts and restarts must be >= 1")
        if not (self.inner_tol > 0 and self.feas_tol > 0):
            raise ValueError("tolerances must be positive")
        if not (self.mu0 > 0 and self.eps > 1 and self.mu_max >= self.mu0):
            raise ValueError("invalid penalty schedule")


@dataclass
class SolveResult:
    u: np.ndarray
    objective: float
    max_violation: float
    converged: bool
    iterations: int
    wall_time: float


class _Problem:
    """Augmented Lagrangian pieces for a stack of rows sharing N and n_obs."""

    def __init__(self, goals, obstacles, cfg):
        self.goals, self.obstacles, self.cfg = goals, obstacles, cfg
        self.Rf = np.tile(np.asarray(cfg.R, dtype=float), cfg.N)

    def value(self, u, lam, mu, rows):
        cfg = self.cfg
        states = rollout(u, cfg)
        r = residuals_from_states(states, self.obstacles[rows], cfg)
        shifted = np.maximum(lam + mu[:, None, None] * r, 0.0)
        val = objective_from_states(states, u, self.goals[rows], cfg)
        return val + (shifted * shifted - lam * lam).sum(axis=(-1, -2)) / (2.0 * mu)

    def second_order(self, u, lam, mu, rows):
        """Value, flat gradient ``(m, P)`` and exact Hessian ``(m, P, P)``."""
        cfg = self.cfg
        g, o = self.goals[rows], self.obstacles[rows]
        m, n = u.shape[0], u.shape[-2]
        P = 2 * n
        lin = linearize(u, o, cfg)
        states, J, r = lin.states, lin.jac.reshape(m, n + 1, 3, P), lin.residuals
        shifted = np.maximum(lam + mu[:, None, None] * r, 0.0)
        val = objective_from_states(states, u, g, cfg)
        val = val + (shifted * shifted - lam * lam).sum(axis=(-1, -2)) / (2.0 * mu)

        Q = np.asarray(cfg.Q, dtype=float)
        # per-state weights of the barrier terms folded into the residuals
        c = np.zeros((m, n + 1, o.shape[1]))
        c[:, 1:, :] -= shifted
        c[:, :-1, :] += (1.0 - cfg.gamma_cbf) * shifted
        W = np.einsum("msj,msja->msa", c, _h_grad(states, o))
        W[:, 1:, :] += 2.0 * Q * (states[:, 1:, :] - g[:, None, :])
        D = np.zeros((m, n + 1, 3))
        D[:, 1:, :] += 2.0 * Q
        D[:, :, :2] += 2.0 * c.sum(axis=-1)[..., None]

        grad = np.einsum("msa,msap->mp", W, J) + 2.0 * self.Rf * u.reshape(m, P)
        T = rollout_hessian(u, cfg, states, lin.jac)
        Gf = lin.flat_grads
        act = (shifted.reshape(m, -1) > 0) * mu[:, None]
        H = (
            np.einsum("msap,msa,msar->mpr", J, D, J)
            + np.einsum("msa,msapr->mpr", W, T)
            + np.einsum("mkp,mk,mkr->mpr", Gf, act, Gf)
        )
        H[:, np.arange(P), np.arange(P)] += 2.0 * self.Rf
        return val, grad, H


def _project(u, lo, hi):
    return np.clip(u, lo, hi)


def _inner(prob, u, lam, mu, rows, scfg: SolverConfig, lo, hi):
    """Projected Newton solve of the augmented Lagrangian subproblem.

    Variables pinned at a bound with the gradient pushing outward take plain
    gradient steps; the rest take a Newton step on an eigenvalue-shifted
    Hessian.  Every trial point is clamped to the box and accepted by Armijo
    backtracking along the projection arc.  Returns the new iterates, the
    projected-gradient norm and iteration counts.
    """
    m, n = u.shape[0], u.shape[-2]
    P = 2 * n
    lo_f, hi_f = np.tile(lo, n), np.tile(hi, n)
    x = u.reshape(m, P).copy()
    pg = np.full(m, np.inf)
    iters = np.zeros(m, dtype=int)
    live = np.ones(m, dtype=bool)
    eye = np.eye(P)
    for _ in range(scfg.max_inner + 1):
        a = np.flatnonzero(live)
        if a.size == 0:
            break
        xa = x[a]
        f, g, H = prob.second_order(xa.reshape(-1, n, 2), lam[a], mu[a], rows[a])
        pg[a] = np.abs(np.clip(xa - g, lo_f, hi_f) - xa).max(axis=-1)
        if not np.all(np.isfinite(f)):
            live[a[~np.isfinite(f)]] = False
        go = np.isfinite(f) & (pg[a] > scfg.inner_tol) & (iters[a] < scfg.max_inner)
        live[a[~go]] = False
        if not go.any():
            break
        a, xa, f, g, H = a[go], xa[go], f[go], g[go], H[go]
        eps = np.minimum(1e-3, pg[a])[:, None]
        fixed = ((xa <= lo_f + eps) & (g > 0)) | ((xa >= hi_f - eps) & (g < 0))
        free = ~fixed
        Hf = H * (free[:, :, None] & free[:, None, :]) + eye * fixed[:, :, None]
        ev = np.linalg.eigvalsh(Hf)
        floor = 1e-8 * np.maximum(1.0, np.abs(ev).max(axis=-1))
        shift = np.maximum(0.0, floor - ev[:, 0])
        Hf = Hf + eye * (shift[:, None] * free)[:, :, None]
        d = np.where(free, np.linalg.solve(Hf, (-g * free)[..., None])[..., 0], -g)
        # trials: Newton arc first, then a projected-gradient arc as fallback
        slack = 1e-13 * np.maximum(1.0, np.abs(f))
        xn = xa.copy()
        ok = np.zeros(a.size, dtype=bool)
        for direction in (d, -g):
            t = np.ones(a.size)
            for _ in range(scfg.max_backtracks):
                b = np.flatnonzero(~ok)
                if b.size == 0:
                    break
                trial = np.clip(xa[b] + t[b, None] * direction[b], lo_f, hi_f)
                step = trial - xa[b]
                slope = (g[b] * step).sum(-1)
                ft = prob.value(trial.reshape(-1, n, 2), lam[a[b]], mu[a[b]], rows[a[b]])
                good = (slope < 0) & (ft <= f[b] + scfg.armijo_c1 * slope + slack[b])
                xn[b[good]] = trial[good]
                ok[b[good]] = True
                t[b] *= 0.5
        x[a] = xn
        iters[a] += 1
        # rows where no step makes progress have reached numerical precision
        live[a[~ok]] = False
    return x.reshape(u.shape), pg, iters


def _solve_rows(goals, obstacles, u0, cfg: PlannerConfig, scfg: SolverConfig):
    m = u0.shape[0]
    lo, hi = cfg.lo, cfg.hi
    prob = _Problem(goals, obstacles, cfg)
    u = _project(u0, lo, hi)
    n_obs = obstacles.shape[1]
    lam = np.zeros((m, cfg.N, n_obs))
    mu = np.full(m, scfg.mu0)
    prev_viol = np.full(m, np.inf)
    iters = np.zeros(m, dtype=int)
    pg = np.full(m, np.inf)
    live = np.ones(m, dtype=bool)
    for _ in range(scfg.max_outer):
        a = np.flatnonzero(live)
        if a.size == 0:
            break
        ua, pga, it = _inner(prob, u[a], lam[a], mu[a], a, scfg, lo, hi)
        u[a], pg[a] = ua, pga
        iters[a] += it
        if not np.all(np.isfinite(ua)):
            bad = a[~np.all(np.isfinite(ua), axis=(-1, -2))]
            live[bad] = False
        r = residuals_from_states(rollout(ua, cfg), obstacles[a], cfg)
        viol = np.maximum(r, 0.0).max(axis=(-1, -2)) if n_obs else np.zeros(a.size)
        new_lam = np.maximum(lam[a] + mu[a, None, None] * r, 0.0)
        # complementarity measure: multipliers that stay positive on slack constraints
        comp = np.abs(np.minimum(-r, new_lam)).max(axis=(-1, -2)) if n_obs else np.zeros(a.size)
        lam[a] = new_lam
        grow = viol > 0.25 * prev_viol[a]
        mu[a] = np.where(grow, np.minimum(mu[a] * scfg.eps, scfg.mu_max), mu[a])
        prev_viol[a] = viol
        done = (viol <= scfg.feas_tol) & (pga <= scfg.inner_tol) & (comp <= scfg.feas_tol)
        live[a[done]] = False
    return u, pg, iters


def _restart_inits(N: int, cfg: PlannerConfig, scfg: SolverConfig) -> np.ndarray:
    rng = np.random.default_rng(scfg.seed)
    inits = [np.zeros((N, 2))]
    for _ in range(scfg.restarts - 1):
        inits.append(rng.uniform(cfg.lo, cfg.hi, size=(N, 2)))
    return np.stack(inits)


def batch_solve(instances, cfg: PlannerConfig, scfg: SolverConfig = SolverConfig(), chunk: int = 128) -> list[SolveResult]:
    """Solve every instance; results keep the input order."""
    instances = list(instances)
    out: list = [None] * len(instances)
    # rows are stacked per obstacle count
    for n_obs in sorted({inst.n_obs for inst in instances}):
        idx = [i for i, inst in enumerate(instances) if inst.n_obs == n_obs]
        goals, obstacles = stack_instances([instances[i] for i in idx])
        for i, res in zip(idx, solve_arrays(goals, obstacles, cfg, scfg, chunk)):
            out[i] = res
    return out


def solve_arrays(goals, obstacles, cfg: PlannerConfig, scfg: SolverConfig = SolverConfig(), chunk: int = 128):
    inits = _restart_inits(cfg.N, cfg, scfg)
    R = inits.shape[0]
    out = []
    for s in range(0, goals.shape[0], chunk):
        t0 = time.perf_counter()
        g, o = goals[s : s + chunk], obstacles[s : s + chunk]
        b = g.shape[0]
        gg = np.repeat(g, R, axis=0)
        oo = np.repeat(o, R, axis=0)
        u0 = np.tile(inits, (b, 1, 1))
        u, pg, iters = _solve_rows(gg, oo, u0, cfg, scfg)
        states = rollout(u, cfg)
        obj = objective_from_states(states, u, gg, cfg)
        r = residuals_from_states(states, oo, cfg)
        viol = np.maximum(r, 0.0).max(axis=(-1, -2)) if o.shape[1] else np.zeros(u.shape[0])
        finite = np.isfinite(obj) & np.all(np.isfinite(u), axis=(-1, -2))
        per = (time.perf_counter() - t0) / b
        for i in range(b):
            rows = np.arange(i * R, (i + 1) * R)
            # feasible first, then objective; non-finite restarts are discarded
            key = [
                (0 if viol[j] <= scfg.feas_tol else 1, obj[j] if finite[j] else np.inf, k)
                for k, j in enumerate(rows)
            ]
            best = rows[min(key)[2]]
            out.append(
                SolveResult(
                    u=u[best].copy(),
                    objective=float(obj[best]),
                    max_violation=float(viol[best]),
                    converged=bool(finite[best] and viol[best] <= scfg.feas_tol),
                    iterations=int(iters[best]),
                    wall_time=per,
                )
            )
    return out


def solve(inst: ProblemInstance, cfg: PlannerConfig, scfg: SolverConfig = SolverConfig()) -> SolveResult:
    t0 = time.perf_counter()
    res = batch_solve([inst], cfg, scfg)[0]
    res.wall_time = time.perf_counter() - t0
    return res


def projected_gradient_norm(u, inst: ProblemInstance, cfg: PlannerConfig) -> float:
    """Infinity norm of the projected objective gradient (stationarity on the box)."""
    from .objective import objective_gradient

    u = np.asarray(u, dtype=float)
    g = objective_gradient(u, inst.x_go, cfg)
    return float(np.abs(np.clip(u - g, cfg.lo, cfg.hi) - u).max())
