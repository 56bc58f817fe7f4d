"""Self-supervised training of the policy network.

The main method wraps the network output in an SLPG correction and minimizes an
augmented Lagrangian of the corrected controls, with a guide-policy term that
pulls the raw output towards its own corrected version.  Baselines (penalty,
DC3-style correction, supervised MSE/MAE) and the two ablations share the same
loop.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import time
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .cbf import residual_state_vjp, residuals_from_states
from .objective import objective_from_states, objective_grad_from_states, stack_instances
from .policy import PolicyNetwork, encode_batch
from .slpg import SlpgConfig, dc3_backward, dc3_batch, slpg_backward, slpg_batch
from .vehicle import PlannerConfig, rollout, rollout_vjp


class Method(str, Enum):
    SOMTP = "somtp"
    SOMTP_NO_DU = "somtp_no_du"
    ALM_ONLY = "alm"
    PENALTY = "penalty"
    DC3 = "dc3"
    MSE = "mse"
    MAE = "mae"

    @property
    def uses_alm(self) -> bool:
        return self in (Method.SOMTP, Method.SOMTP_NO_DU, Method.ALM_ONLY)

    @property
    def uses_slpg(self) -> bool:
        return self in (Method.SOMTP, Method.SOMTP_NO_DU)

    @property
    def supervised(self) -> bool:
        return self in (Method.MSE, Method.MAE)


@dataclass
class AlmState:
    lambda_c: np.ndarray
    lambda_du: np.ndarray
    mu_c: float = 1.0
    mu_du: float = 1.0
    beta_c: float | None = None
    beta_du: float | None = None
    eps_c: float = 2.0
    eps_du: float = 2.0
    mu_c_max: float = 1e4
    mu_du_max: float = 1e4
    eta_theta: float = 1e-4

    def __post_init__(self):
        self.lambda_c = np.asarray(self.lambda_c, dtype=float)
        self.lambda_du = np.asarray(self.lambda_du, dtype=float)
        if np.any(self.lambda_c < 0) or np.any(self.lambda_du < 0):
            raise ValueError("multipliers must be nonnegative")
        if not (0 < self.mu_c <= self.mu_c_max and 0 < self.mu_du <= self.mu_du_max):
            raise ValueError("penalties must be positive and within their caps")
        if not (self.eps_c > 1 and self.eps_du > 1):
            raise ValueError("penalty growth factors must exceed 1")

    @classmethod
    def zeros(cls, N: int, n_obs: int, **kw) -> "AlmState":
        return cls(np.zeros((N, n_obs)), np.zeros((N, 2)), **kw)


def _relu(r):
    return np.maximum(r, 0.0)


def alm_terms(u_hat, du, goals, obstacles, alm: AlmState, cfg: PlannerConfig, use_du=True):
    """Per-instance augmented Lagrangian and its gradients w.r.t. ``u_hat`` and ``du``.

    Batched over the leading axis.  Returns ``(loss, grad_u_hat, grad_du, H)``
    where ``H`` holds the positive parts of the residuals at ``u_hat``.
    """
    states = rollout(u_hat, cfg)
    r = residuals_from_states(states, obstacles, cfg)
    H = _relu(r)
    loss = objective_from_states(states, u_hat, goals, cfg)
    loss = loss + (alm.lambda_c * H).sum(axis=(-1, -2)) + 0.5 * alm.mu_c * (H * H).sum(axis=(-1, -2))
    rbar = (alm.lambda_c + alm.mu_c * H) * (r > 0)
    xbar = residual_state_vjp(states, obstacles, rbar, cfg)
    g_hat = objective_grad_from_states(states, u_hat, goals, cfg) + rollout_vjp(u_hat, states, xbar, cfg)
    if use_du:
        loss = loss + (alm.lambda_du * np.abs(du)).sum(axis=(-1, -2)) + 0.5 * alm.mu_du * (du * du).sum(axis=(-1, -2))
        g_du = alm.lambda_du * np.sign(du) + alm.mu_du * du
    else:
        g_du = np.zeros_like(du)
    return loss, g_hat, g_du, H


def alm_loss(u_hat, du, inst, alm: AlmState, cfg: PlannerConfig, use_du=True) -> float:
    u_hat = np.asarray(u_hat, dtype=float)
    du = np.asarray(du, dtype=float).reshape(u_hat.shape)
    loss, *_ = alm_terms(u_hat[None], du[None], inst.x_go[None], inst.obstacles[None], alm, cfg, use_du)
    return float(loss[0])


def penalty_terms(u_hat, goals, obstacles, lambda_g: float, cfg: PlannerConfig):
    states = rollout(u_hat, cfg)
    r = residuals_from_states(states, obstacles, cfg)
    H = _relu(r)
    loss = objective_from_states(states, u_hat, goals, cfg) + lambda_g * (H * H).sum(axis=(-1, -2))
    xbar = residual_state_vjp(states, obstacles, 2.0 * lambda_g * H, cfg)
    grad = objective_grad_from_states(states, u_hat, goals, cfg) + rollout_vjp(u_hat, states, xbar, cfg)
    return loss, grad, H


def penalty_loss(u_hat, inst, lambda_g: float, cfg: PlannerConfig) -> float:
    if not lambda_g > 0:
        raise ValueError("lambda_g must be positive")
    u_hat = np.asarray(u_hat, dtype=float)
    loss, _, _ = penalty_terms(u_hat[None], inst.x_go[None], inst.obstacles[None], lambda_g, cfg)
    return float(loss[0])


def supervised_loss(u, target, mode: str = "mse") -> float:
    u = np.asarray(u, dtype=float)
    target = np.asarray(target, dtype=float)
    if u.shape != target.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {target.shape}")
    diff = u - target
    if str(mode).lower() == "mse":
        return float(np.mean(diff * diff))
    if str(mode).lower() == "mae":
        return float(np.mean(np.abs(diff)))
    raise ValueError(f"unknown supervised mode {mode!r}")


def update_multipliers(alm: AlmState, mean_h, mean_abs_du) -> AlmState:
    """Dual ascent on both multiplier sets with the current penalties as step sizes."""
    mean_h = np.asarray(mean_h, dtype=float)
    mean_abs_du = np.asarray(mean_abs_du, dtype=float)
    if np.any(mean_h < 0) or np.any(mean_abs_du < 0):
        raise ValueError("batch means of violations must be nonnegative")
    return dataclasses.replace(
        alm,
        lambda_c=alm.lambda_c + alm.mu_c * mean_h,
        lambda_du=alm.lambda_du + alm.mu_du * mean_abs_du.reshape(alm.lambda_du.shape),
    )


def update_penalties(alm: AlmState, epoch_h_sq: float, epoch_du_sq: float) -> AlmState:
    """End-of-epoch penalty growth, applied per channel when its violation shrank enough.

    A channel whose tracker is still unset takes the epoch mean as its first value.
    """
    kw = {}
    for name, value in (("c", epoch_h_sq), ("du", epoch_du_sq)):
        if value < 0:
            raise ValueError("epoch means must be nonnegative")
        beta = getattr(alm, f"beta_{name}")
        eps = getattr(alm, f"eps_{name}")
        if beta is None:
            kw[f"beta_{name}"] = float(value)
        elif value < beta / eps:
            kw[f"beta_{name}"] = float(value)
            kw[f"mu_{name}"] = min(eps * getattr(alm, f"mu_{name}"), getattr(alm, f"mu_{name}_max"))
    return dataclasses.replace(alm, **kw)


@dataclass(frozen=True)
class TrainConfig:
    method: Method = Method.SOMTP
    epochs: int = 50
    batch_size: int = 64
    seed: int = 0
    optimizer: str = "sgd"
    lr: float = 1e-4
    lambda_g: float = 10.0
    dc3_gamma: float = 1e-3
    dc3_steps: int = 5
    slpg: SlpgConfig = SlpgConfig(n_m=2, i_m=2)

    def __post_init__(self):
        object.__setattr__(self, "method", Method(self.method))
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError("optimizer must be 'sgd' or 'adam'")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    mean_viol: float
    max_viol: float
    mean_du_sq: float
    mu_c: float
    mu_du: float
    seconds: float


REPORT_COLUMNS = ["epoch", "loss", "mean_viol", "max_viol", "mean_du_sq", "mu_c", "mu_du"]


@dataclass
class TrainReport:
    records: list = field(default_factory=list)
    aborted: bool = False

    def to_csv(self, with_time: bool = False) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        cols = REPORT_COLUMNS + (["seconds"] if with_time else [])
        w.writerow(cols)
        for rec in self.records:
            w.writerow([repr(getattr(rec, c)) for c in cols])
        return buf.getvalue()

    def timing_csv(self) -> str:
        lines = ["epoch,seconds"] + [f"{r.epoch},{r.seconds!r}" for r in self.records]
        return "\n".join(lines) + "\n"


class TrainingDiverged(RuntimeError):
    def __init__(self, message, report: TrainReport):
        super().__init__(message)
        self.report = report


class _Sgd:
    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        for p, g in zip(params, grads):
            p -= self.lr * g


class _Adam:
    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = self.v = None

    def step(self, params, grads):
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * g * g
            p -= self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def batch_loss_and_grad(net, u, goals, obstacles, alm, cfg, tcfg: TrainConfig, targets=None):
    """Mean loss over the batch, the cotangent on the raw network output, and diagnostics."""
    method = tcfg.method
    B = u.shape[0]
    du = np.zeros_like(u)
    if method.uses_slpg:
        res = slpg_batch(u, obstacles, cfg, tcfg.slpg, record=True)
        use_du = method is Method.SOMTP
        loss, g_hat, g_du, H = alm_terms(res.u_hat, res.du, goals, obstacles, alm, cfg, use_du)
        du = res.du
        ubar = slpg_backward(res, g_hat + g_du, cfg, tcfg.slpg) - g_du
    elif method is Method.ALM_ONLY:
        loss, ubar, _, H = alm_terms(u, du, goals, obstacles, alm, cfg, use_du=False)
    elif method is Method.PENALTY:
        loss, ubar, H = penalty_terms(u, goals, obstacles, tcfg.lambda_g, cfg)
    elif method is Method.DC3:
        u_hat, tape = dc3_batch(u, obstacles, cfg, tcfg.dc3_gamma, tcfg.dc3_steps, record=True)
        loss, g_hat, H = penalty_terms(u_hat, goals, obstacles, tcfg.lambda_g, cfg)
        ubar = dc3_backward(tape, g_hat, cfg, tcfg.dc3_gamma)
    else:
        diff = u - targets
        if method is Method.MSE:
            loss = (diff * diff).mean(axis=(-1, -2))
            ubar = 2.0 * diff / diff[0].size
        else:
            loss = np.abs(diff).mean(axis=(-1, -2))
            ubar = np.sign(diff) / diff[0].size
        H = _relu(residuals_from_states(rollout(u, cfg), obstacles, cfg))
    return loss, ubar / B, H, du


def train(dataset, net: PolicyNetwork, alm: AlmState | None, cfg: PlannerConfig, tcfg: TrainConfig,
          targets=None, log=None):
    """Train ``net`` in place; returns ``(net, TrainReport, alm)``.

    ``dataset`` is a sequence of ProblemInstance or a ``(goals, obstacles)``
    pair of arrays.  ``targets`` ``(n, N, 2)`` is required for MSE/MAE.
    """
    if isinstance(dataset, tuple):
        goals, obstacles = (np.asarray(a, dtype=float) for a in dataset)
    else:
        goals, obstacles = stack_instances(dataset)
    n = goals.shape[0]
    method = tcfg.method
    report = TrainReport()
    if tcfg.epochs == 0:
        return net, report, alm
    if n == 0:
        raise ValueError("dataset is empty")
    if method.supervised:
        if targets is None:
            raise ValueError(f"method {method.value} needs solver targets")
        targets = np.asarray(targets, dtype=float).reshape(n, cfg.N, 2)
    if method.uses_alm and alm is None:
        alm = AlmState.zeros(cfg.N, obstacles.shape[1], eta_theta=tcfg.lr)
    rng = np.random.default_rng(tcfg.seed)
    opt = _Adam(tcfg.lr) if tcfg.optimizer == "adam" else _Sgd(tcfg.lr)
    enc_all = encode_batch(goals, obstacles)
    net.training = True
    try:
        for epoch in range(tcfg.epochs):
            t0 = time.perf_counter()
            order = rng.permutation(n)
            tot_loss = tot_viol = tot_h2 = tot_du2 = 0.0
            max_viol = 0.0
            for start in range(0, n, tcfg.batch_size):
                idx = order[start : start + tcfg.batch_size]
                u = net.forward(enc_all[idx], rng)
                loss, ubar, H, du = batch_loss_and_grad(
                    net, u, goals[idx], obstacles[idx], alm, cfg, tcfg,
                    None if targets is None else targets[idx],
                )
                if not np.all(np.isfinite(loss)) or not np.all(np.isfinite(ubar)):
                    raise TrainingDiverged(f"non-finite loss in epoch {epoch}", report)
                opt.step(net.params, net.backward(ubar))
                if method.uses_alm:
                    mean_abs = np.abs(du).mean(axis=0) if method is Method.SOMTP else np.zeros_like(alm.lambda_du)
                    alm = update_multipliers(alm, H.mean(axis=0), mean_abs)
                tot_loss += float(loss.sum())
                tot_viol += float(H.sum())
                tot_h2 += float((H * H).sum())
                tot_du2 += float((du * du).sum())
                if H.size:
                    max_viol = max(max_viol, float(H.max()))
            if method.uses_alm:
                alm = update_penalties(alm, tot_h2 / n, tot_du2 / n if method is Method.SOMTP else 0.0)
            rec = EpochRecord(
                epoch=epoch,
                loss=tot_loss / n,
                mean_viol=tot_viol / n,
                max_viol=max_viol,
                mean_du_sq=tot_du2 / n,
                mu_c=float(alm.mu_c) if alm is not None else 0.0,
                mu_du=float(alm.mu_du) if alm is not None else 0.0,
                seconds=time.perf_counter() - t0,
            )
            report.records.append(rec)
            if log is not None:
                log(rec)
    except TrainingDiverged:
        report.aborted = True
        raise
    finally:
        net.training = False
    return net, report, alm
