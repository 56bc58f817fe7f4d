"""Per-instance metrics, summary rows and the planner timing protocol."""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .cbf import residuals_from_states
from .objective import objective_from_states
from .policy import PolicyNetwork, encode_batch, encode_instance
from .slpg import SlpgConfig, correct, dc3_batch, dc3_correct, slpg_batch
from .vehicle import PlannerConfig, rollout

SUMMARY_COLUMNS = ["method", "correction", "n", "obj_mean", "mean_cbf", "max_cbf", "infeasible_pct", "infeas_tol"]
INSTANCE_COLUMNS = ["index", "objective", "sum_relu", "max_viol"]


CORRECTIONS = ("slpg", "dc3", "none")


# Test-time SLPG uses a heavier penalty than training. Each outer step then closes
# more of the linearized violation; training keeps the lighter default, since a
# heavy guide correction teaches the network to creep.
TEST_LAMBDA_C = 100.0
TEST_SLPG = SlpgConfig(lambda_c=TEST_LAMBDA_C)


@dataclass(frozen=True)
class Correction:
    """Test-time correction applied to network outputs before scoring."""

    kind: str = "slpg"
    slpg: SlpgConfig = TEST_SLPG
    dc3_gamma: float = 1e-3
    dc3_steps: int = 5

    def __post_init__(self):
        if self.kind not in CORRECTIONS:
            raise ValueError(f"unknown correction {self.kind!r}; expected one of {CORRECTIONS}")
        if self.dc3_steps < 0 or not self.dc3_gamma > 0:
            raise ValueError("dc3 steps must be >= 0 and its step size positive")

    def batch(self, u, obstacles, cfg: PlannerConfig):
        if self.kind == "slpg":
            return slpg_batch(u, obstacles, cfg, self.slpg).u_hat
        if self.kind == "dc3":
            return dc3_batch(u, obstacles, cfg, self.dc3_gamma, self.dc3_steps)
        return u

    def single(self, u, inst, cfg: PlannerConfig):
        if self.kind == "slpg":
            return correct(u, inst, cfg, self.slpg)[0]
        if self.kind == "dc3":
            return dc3_correct(u, inst, cfg, self.dc3_gamma, self.dc3_steps)
        return u


def as_correction(c) -> Correction:
    """Accept a Correction, an SlpgConfig (SLPG with that budget) or None (no correction)."""
    if c is None:
        return Correction("none")
    if isinstance(c, SlpgConfig):
        return Correction("slpg", c)
    return c


@dataclass
class InstanceMetrics:
    objective: np.ndarray
    sum_relu: np.ndarray
    max_viol: np.ndarray


@dataclass
class EvalRow:
    method: str
    correction: str
    n: int
    obj_mean: float
    mean_cbf: float
    max_cbf: float
    infeasible_pct: float
    infeas_tol: float

    def values(self) -> list:
        return [getattr(self, c) for c in SUMMARY_COLUMNS]


def instance_metrics(u, goals, obstacles, cfg: PlannerConfig) -> InstanceMetrics:
    u = np.asarray(u, dtype=float)
    states = rollout(u, cfg)
    r = np.maximum(residuals_from_states(states, obstacles, cfg), 0.0)
    obj = objective_from_states(states, u, goals, cfg)
    if r.shape[-1] == 0:
        z = np.zeros(u.shape[0])
        return InstanceMetrics(obj, z, z.copy())
    return InstanceMetrics(obj, r.sum(axis=(-1, -2)), r.max(axis=(-1, -2)))


def summarize(method: str, correction: str, m: InstanceMetrics, infeas_tol: float) -> EvalRow:
    """Objective mean, mean of summed violations, worst violation and the infeasible share."""
    n = int(m.objective.shape[0])
    if n == 0:
        raise ValueError("cannot summarize an empty evaluation")
    return EvalRow(
        method=method,
        correction=str(correction),
        n=n,
        obj_mean=float(np.mean(m.objective)),
        mean_cbf=float(np.mean(m.sum_relu)),
        max_cbf=float(np.max(m.max_viol)),
        infeasible_pct=float(100.0 * np.mean(m.max_viol > infeas_tol)),
        infeas_tol=float(infeas_tol),
    )


def network_controls(net: PolicyNetwork, goals, obstacles, correction=None, chunk: int = 1024):
    """Inference-mode outputs for a whole split, corrected per ``correction`` (see :func:`as_correction`)."""
    cfg = net.planner
    corr = as_correction(correction)
    out = []
    for s in range(0, goals.shape[0], chunk):
        g, o = goals[s : s + chunk], obstacles[s : s + chunk]
        out.append(corr.batch(net.forward(encode_batch(g, o)), o, cfg))
    return np.concatenate(out) if out else np.zeros((0, cfg.N, 2))


def network_call(net: PolicyNetwork, correction=None):
    corr = as_correction(correction)

    def plan(inst):
        return corr.single(net.forward(encode_instance(inst)), inst, net.planner)

    return plan


def time_planner(plan, instances, repeats: int = 3) -> np.ndarray:
    """Median wall time in milliseconds of ``plan(inst)`` per instance, planner call only."""
    out = np.zeros(len(instances))
    for i, inst in enumerate(instances):
        samples = []
        for _ in range(repeats):
            t0 = time.perf_counter()
            plan(inst)
            samples.append(time.perf_counter() - t0)
        out[i] = 1000.0 * float(np.median(samples))
    return out
