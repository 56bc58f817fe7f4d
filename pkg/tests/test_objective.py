import numpy as np
import pytest

from conftest import central_diff, random_controls, rel_err
from somtp.objective import ProblemInstance, objective_gradient, objective_value, stack_instances
from somtp.vehicle import PlannerConfig


def test_objective_zero_everything():
    assert objective_value(np.zeros((20, 2)), np.zeros(3), PlannerConfig()) == 0.0


def test_objective_constant_offset():
    assert objective_value(np.zeros((20, 2)), np.array([1.0, 0.0, 0.0]), PlannerConfig()) == pytest.approx(40.0)


def test_objective_single_step():
    cfg = PlannerConfig(N=1)
    assert objective_value(np.array([[1.0, 0.0]]), np.zeros(3), cfg) == pytest.approx(1.02)


def test_gradient_zero_at_origin():
    assert np.all(objective_gradient(np.zeros((20, 2)), np.zeros(3), PlannerConfig()) == 0)


def test_gradient_matches_fd(rng):
    cfg = PlannerConfig(N=6)
    for _ in range(10):
        u = random_controls(rng, cfg)
        goal = np.r_[rng.uniform(-3, 3, 2), rng.uniform(-3, 3)]
        fd = central_diff(lambda w: objective_value(w, goal, cfg), u)
        assert rel_err(objective_gradient(u, goal, cfg), fd) < 1e-6


def test_control_cost_only_gradient(rng):
    cfg = PlannerConfig(N=5, Q=(0.0, 0.0, 0.0))
    u = random_controls(rng, cfg)
    assert np.allclose(objective_gradient(u, np.ones(3), cfg), 2 * np.asarray(cfg.R) * u, atol=1e-15)


def test_instance_accepts_problem_instance_and_validates():
    inst = ProblemInstance([1.0, 0.0, 0.0])
    assert objective_value(np.zeros((20, 2)), inst, PlannerConfig()) == pytest.approx(40.0)
    assert inst.n_obs == 0
    with pytest.raises(ValueError):
        ProblemInstance([np.nan, 0, 0])


def test_stack_instances_rejects_mixed_counts():
    a = ProblemInstance(np.zeros(3), np.zeros((1, 3)))
    b = ProblemInstance(np.zeros(3), np.zeros((2, 3)))
    with pytest.raises(ValueError):
        stack_instances([a, b])
    g, o = stack_instances([a, a])
    assert g.shape == (2, 3) and o.shape == (2, 1, 3)
