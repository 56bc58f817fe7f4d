import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import central_diff, random_controls, rel_err
from somtp.cbf import all_residuals, linearize, violation_stats
from somtp.objective import ProblemInstance
from somtp.slpg import (
    SlpgConfig,
    armijo_box_search,
    correct,
    dc3_backward,
    dc3_batch,
    dc3_correct,
    j_corr,
    slpg_backward,
    slpg_batch,
)
from somtp.vehicle import PlannerConfig

CFG = PlannerConfig(N=10)
SCFG = SlpgConfig()


def violating_instance(rng, cfg=CFG):
    """Straight-ahead controls and one obstacle placed on the path."""
    v = rng.uniform(0.5, 1.0)
    u = np.tile([v, 0.0], (cfg.N, 1))
    dist = rng.uniform(0.6, 1.0)
    obs = np.array([[dist, rng.uniform(-0.1, 0.1), rng.uniform(0.05, 0.3)]])
    return u, ProblemInstance(np.array([3.0, 0.0, 0.0]), obs)


def test_j_corr_examples():
    cfg = PlannerConfig(N=2)
    u = np.zeros((2, 2))
    far = linearize(u, np.array([[5.0, 0.0, 0.1]]), cfg)
    assert j_corr(np.zeros(4), far, cfg, SCFG) == 0.0
    lin = linearize(u, np.array([[5.0, 0.0, 0.1]]), cfg)
    lin.residuals = np.array([[0.3], [-1.0]])
    assert j_corr(np.zeros(4), lin, cfg, SlpgConfig(lambda_c=10.0)) == pytest.approx(0.9)
    assert j_corr(np.zeros(4), lin, cfg, SCFG) == pytest.approx(SCFG.lambda_c * 0.09)


def test_j_corr_quadratic_when_residuals_nonpositive(rng):
    cfg = PlannerConfig(N=3)
    lin = linearize(np.zeros((3, 2)), np.array([[5.0, 0.0, 0.1]]), cfg)
    du = rng.normal(size=6) * 1e-3
    Rf = np.tile(cfg.R, 3)
    assert j_corr(du, lin, cfg, SCFG) == pytest.approx(float((Rf * du * du).sum()))


def test_armijo_zero_gradient_returns_initial_step():
    cfg = PlannerConfig(N=3)
    lin = linearize(np.zeros((3, 2)), np.array([[5.0, 0.0, 0.1]]), cfg)
    assert armijo_box_search(np.zeros(6), np.zeros(6), lin, np.zeros(6), cfg, SCFG) == SCFG.step0


def test_armijo_accepts_initial_step_inside_box():
    cfg = PlannerConfig(N=3)
    lin = linearize(np.zeros((3, 2)), np.array([[5.0, 0.0, 0.1]]), cfg)
    du = np.full(6, 0.01)
    d = 0.1 * 2 * np.tile(cfg.R, 3) * du
    assert armijo_box_search(du, d, lin, np.zeros(6), cfg, SCFG) == SCFG.step0


def test_armijo_box_brute_force(rng):
    cfg = PlannerConfig(N=3)
    lin = linearize(np.zeros((3, 2)), np.array([[5.0, 0.0, 0.1]]), cfg)
    lo, hi = np.tile(cfg.lo, 3), np.tile(cfg.hi, 3)
    for _ in range(20):
        base = rng.uniform(lo, hi)
        du = np.zeros(6)
        d = rng.normal(size=6) * 5
        t = armijo_box_search(du, d, lin, base, cfg, SCFG)
        seq = SCFG.step0 * SCFG.armijo_shrink ** np.arange(SCFG.armijo_max_iters)
        first = None
        for cand in seq:
            moved = base + du - cand * d
            J0, Jt = j_corr(du, lin, cfg, SCFG), j_corr(du - cand * d, lin, cfg, SCFG)
            if np.all((moved >= lo) & (moved <= hi)) and Jt <= J0 - SCFG.armijo_c1 * cand * (d @ d):
                first = cand
                break
        assert t == (first if first is not None else seq[-1])


def test_correct_feasible_input_unchanged(rng):
    inst = ProblemInstance(np.array([2.0, 0.0, 0.0]), np.array([[0.0, 3.0, 0.2]]))
    u = np.tile([0.5, 0.0], (10, 1))
    u_hat, du = correct(u, inst, CFG, SCFG)
    assert np.array_equal(u_hat, u) and np.all(du == 0)


def test_correct_no_obstacles(rng):
    u = random_controls(rng, CFG)
    u_hat, du = correct(u, ProblemInstance(np.zeros(3)), CFG, SCFG)
    assert np.all(du == 0) and np.array_equal(u_hat, u)


def test_correct_reduces_violation_on_straight_line(rng):
    better = 0
    for _ in range(100):
        u, inst = violating_instance(rng)
        u_hat, du = correct(u, inst, CFG, SCFG)
        before = violation_stats(all_residuals(u, inst.obstacles, CFG))[1]
        after = violation_stats(all_residuals(u_hat, inst.obstacles, CFG))[1]
        assert np.all((u_hat >= CFG.lo) & (u_hat <= CFG.hi))
        assert np.array_equal(du, u_hat - u)
        better += after < before
    assert better >= 90


def test_slpg_backward_matches_fd_with_replayed_steps(rng):
    cfg = PlannerConfig(N=5)
    scfg = SlpgConfig(n_m=3, i_m=2)
    worst = 0.0
    checked = 0
    for _ in range(20):
        u = np.tile([rng.uniform(0.5, 0.9), 0.0], (1, 5, 1)) + rng.normal(size=(1, 5, 2)) * 0.05
        obs = np.array([[[rng.uniform(0.5, 0.7), rng.uniform(-0.1, 0.1), rng.uniform(0.05, 0.2)]]])
        res = slpg_batch(u, obs, cfg, scfg, record=True)
        if not res.tape:
            continue
        w = rng.normal(size=u.shape)
        got = slpg_backward(res, w, cfg, scfg)

        def f(z):
            return float((slpg_batch(z, obs, cfg, scfg, steps=res.steps).u_hat * w).sum())

        fd = central_diff(f, u, h=1e-7)
        worst = max(worst, rel_err(got, fd))
        checked += 1
    assert checked >= 10
    assert worst < 1e-5


def test_slpg_batch_matches_single_runs(rng):
    us, insts = zip(*[violating_instance(rng) for _ in range(6)])
    u = np.stack(us)
    obs = np.stack([i.obstacles for i in insts])
    batch = slpg_batch(u, obs, CFG, SCFG).u_hat
    for b in range(6):
        assert np.allclose(batch[b], correct(us[b], insts[b], CFG, SCFG)[0], atol=1e-12)


def test_dc3_identity_cases(rng):
    u = random_controls(rng, CFG)
    inst = ProblemInstance(np.zeros(3), np.array([[0.0, 5.0, 0.1]]))
    if violation_stats(all_residuals(u, inst.obstacles, CFG))[1] == 0:
        assert np.array_equal(dc3_correct(u, inst, CFG), u)
    assert np.array_equal(dc3_correct(u, inst, CFG, steps=0), u)


def test_dc3_reduces_violation_with_small_step(rng):
    u, inst = violating_instance(rng)
    before = violation_stats(all_residuals(u, inst.obstacles, CFG))[0]
    gamma = 1e-2
    for _ in range(20):
        after = violation_stats(all_residuals(dc3_correct(u, inst, CFG, gamma, 1), inst.obstacles, CFG))[0]
        if after <= before:
            break
        gamma /= 2
    assert after <= before


def test_dc3_backward_matches_fd(rng):
    cfg = PlannerConfig(N=5)
    u, inst = violating_instance(rng, cfg)
    u = u[None] + rng.normal(size=(1, 5, 2)) * 0.05
    obs = inst.obstacles[None]
    u_hat, tape = dc3_batch(u, obs, cfg, 1e-2, 3, record=True)
    w = rng.normal(size=u.shape)
    got = dc3_backward(tape, w, cfg, 1e-2)
    fd = central_diff(lambda z: float((dc3_batch(z, obs, cfg, 1e-2, 3) * w).sum()), u)
    assert rel_err(got, fd) < 1e-6


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_correction_stays_in_box(seed):
    rng = np.random.default_rng(seed)
    u = random_controls(rng, CFG)
    obs = np.c_[rng.uniform(-1, 1, (3, 2)), rng.uniform(0, 0.5, 3)]
    u_hat, _ = correct(u, ProblemInstance(np.zeros(3), obs), CFG, SCFG)
    assert np.all((u_hat >= CFG.lo) & (u_hat <= CFG.hi))


def test_config_validation():
    with pytest.raises(ValueError):
        SlpgConfig(n_m=0)
    with pytest.raises(ValueError):
        SlpgConfig(armijo_shrink=1.0)


def test_correction_moves_saturated_controls(rng):
    # every entry sits on a bound, as saturated tanh outputs do; the correction
    # must still make real progress instead of stalling on the capped step
    ratios = []
    while len(ratios) < 60:
        u = np.where(rng.random((CFG.N, 2)) < 0.5, CFG.lo, CFG.hi)
        obs = np.c_[rng.uniform(-1.5, 1.5, (3, 2)), rng.uniform(0, 0.5, 3)]
        if np.any((obs[:, :2] ** 2).sum(1) <= (obs[:, 2] + CFG.inflation) ** 2):
            continue
        before = np.maximum(all_residuals(u, obs, CFG), 0).max()
        if before <= 0:
            continue
        u_hat, _ = correct(u, ProblemInstance(np.zeros(3), obs), CFG, SCFG)
        ratios.append(np.maximum(all_residuals(u_hat, obs, CFG), 0).max() / before)
    assert np.median(ratios) < 0.5
    assert np.mean(np.array(ratios) < 0.5) >= 0.75


def test_bound_active_coordinates_leave_the_direction(rng):
    u = np.tile([CFG.hi[0], 0.0], (CFG.N, 1))
    obs = np.array([[0.8, 0.0, 0.2]])
    res = slpg_batch(u[None], obs[None], CFG, SCFG, record=True)
    first = res.tape[0].inner[0]
    G = res.tape[0].lin.flat_grads[0]
    d = 2.0 * SCFG.lambda_c * G.T @ first.p[0]
    at_hi = np.tile(CFG.hi, CFG.N) <= u.reshape(-1)
    assert np.array_equal(first.free[0], ~(at_hi & (d < 0)) & ~((np.tile(CFG.lo, CFG.N) >= u.reshape(-1)) & (d > 0)))
    # driving at full speed into the obstacle: slowing down first helps, so that speed stays free
    assert first.free[0][0] and d[0] > 0
