import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, random_controls, rel_err
from somtp.vehicle import (
    PlannerConfig,
    rollout,
    rollout_hessian,
    rollout_jacobian,
    rollout_jacobian_vjp,
    rollout_vjp,
    step,
    step_jacobians,
)

CFG = PlannerConfig()


def test_step_straight_ahead():
    assert np.allclose(step([0, 0, 0], [1.0, 0.0], CFG), [0.1, 0, 0], atol=1e-15)


def test_step_zero_velocity_freezes_state():
    assert np.array_equal(step([3, -1, 0.7], [0, 0.3], CFG), [3, -1, 0.7])


def test_step_facing_up():
    assert np.allclose(step([0, 0, math.pi / 2], [1.0, 0.0], CFG), [0, 0.1, math.pi / 2], atol=1e-15)


def test_rollout_zero_controls():
    assert np.array_equal(rollout(np.zeros((20, 2)), CFG), np.zeros((21, 3)))


def test_rollout_three_straight_steps():
    cfg = PlannerConfig(N=3)
    states = rollout(np.tile([1.0, 0.0], (3, 1)), cfg)
    assert np.allclose(states, [[0, 0, 0], [0.1, 0, 0], [0.2, 0, 0], [0.3, 0, 0]], atol=1e-15)


def test_rollout_large_steer_heading_increment():
    cfg = PlannerConfig(N=1, u_max=(1.0, 1.5), u_min=(-1.0, -1.5))
    v = 1.0
    q = math.atan(cfg.L * math.pi / (2 * v * cfg.dt))
    states = rollout(np.array([[v, q]]), cfg)
    assert states[1, 2] == pytest.approx(v * math.tan(q) / cfg.L * cfg.dt)
    assert states[1, 2] == pytest.approx(math.pi / 2)


def test_rollout_batched_matches_single(rng):
    cfg = PlannerConfig(N=6)
    u = random_controls(rng, cfg, (4,))
    batch = rollout(u, cfg)
    for b in range(4):
        assert np.array_equal(batch[b], rollout(u[b], cfg))


def test_step_jacobians_zero_point():
    A, B = step_jacobians([0, 0, 0], [0, 0], CFG)
    assert np.array_equal(A, np.eye(3))
    assert np.allclose(B[0], [CFG.dt, 0])


def test_step_jacobian_heading_partial():
    A, _ = step_jacobians([0, 0, math.pi / 2], [1, 0], CFG)
    assert A[0, 2] == pytest.approx(-0.1)


def test_step_jacobians_match_finite_differences(rng):
    for _ in range(20):
        x = rng.uniform(-2, 2, 3)
        u = rng.uniform(CFG.lo, CFG.hi)
        A, B = step_jacobians(x, u, CFG)
        assert rel_err(A, central_diff(lambda z: step(z, u, CFG), x)) < 1e-6
        assert rel_err(B, central_diff(lambda w: step(x, w, CFG), u)) < 1e-6


def test_step_jacobians_reject_right_angle_steer():
    with pytest.raises(ValueError):
        step_jacobians([0, 0, 0], [1, math.pi / 2], CFG)


def test_rollout_jacobian_identity_chain_at_zero():
    cfg = PlannerConfig(N=4)
    J = rollout_jacobian(np.zeros((4, 2)), cfg)
    _, B = step_jacobians(np.zeros(3), np.zeros(2), cfg)
    for k in range(1, 5):
        for i in range(k):
            assert np.array_equal(J[k, :, i, :], B)


def test_rollout_jacobian_causal_and_matches_fd(rng):
    cfg = PlannerConfig(N=3)
    u = random_controls(rng, cfg)
    J = rollout_jacobian(u, cfg)
    for k in range(4):
        for i in range(k, 3):
            assert np.all(J[k, :, i, :] == 0)
    assert rel_err(J, central_diff(lambda w: rollout(w, cfg), u)) < 1e-6


def test_rollout_vjp_is_adjoint_of_jacobian(rng):
    cfg = PlannerConfig(N=7)
    u = random_controls(rng, cfg)
    states = rollout(u, cfg)
    xbar = rng.normal(size=states.shape)
    J = rollout_jacobian(u, cfg, states)
    assert np.allclose(rollout_vjp(u, states, xbar, cfg), np.einsum("ka,kaic->ic", xbar, J), atol=1e-13)


def test_rollout_jacobian_vjp_matches_fd(rng):
    cfg = PlannerConfig(N=4)
    u = random_controls(rng, cfg)
    Jbar = rng.normal(size=(5, 3, 4, 2))
    xbar = rng.normal(size=(5, 3))

    def scalar(w):
        return float((rollout_jacobian(w, cfg) * Jbar).sum() + (rollout(w, cfg) * xbar).sum())

    states = rollout(u, cfg)
    got = rollout_jacobian_vjp(u, states, rollout_jacobian(u, cfg, states), Jbar, xbar, cfg)
    assert rel_err(got, central_diff(scalar, u)) < 1e-6


def test_rollout_hessian_matches_fd_and_is_symmetric(rng):
    cfg = PlannerConfig(N=4)
    u = random_controls(rng, cfg)
    T = rollout_hessian(u, cfg)
    fd = central_diff(lambda w: rollout_jacobian(w, cfg).reshape(5, 3, 8), u).reshape(5, 3, 8, 8)
    assert rel_err(T, fd) < 1e-6
    assert np.array_equal(T, np.swapaxes(T, -1, -2))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=2, max_size=2), st.floats(-0.6, 0.6))
def test_zero_velocity_is_fixed_point(xy, q):
    x = np.array([xy[0], xy[1], 0.3])
    assert np.array_equal(step(x, [0.0, q], CFG), x)


@settings(max_examples=50, deadline=None)
@given(st.floats(-1, 1), st.floats(-0.6, 0.6), st.floats(-math.pi, math.pi))
def test_step_length_equals_speed_times_dt(v, q, phi):
    nxt = step([0.0, 0.0, phi], [v, q], CFG)
    assert math.hypot(nxt[0], nxt[1]) == pytest.approx(abs(v) * CFG.dt, abs=1e-14)


def test_config_validation_and_digest():
    with pytest.raises(ValueError):
        PlannerConfig(N=0)
    with pytest.raises(ValueError):
        PlannerConfig(gamma_cbf=0.0)
    with pytest.raises(ValueError):
        PlannerConfig(u_min=(1.0, -0.6), u_max=(1.0, 0.6))
    cfg = PlannerConfig(N=7)
    assert PlannerConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.digest() != PlannerConfig(N=8).digest()
    assert cfg.inflation == pytest.approx(0.4)
