import numpy as np
import pytest

from somtp.objective import ProblemInstance
from somtp.vehicle import PlannerConfig


def random_controls(rng, cfg, batch=()):
    return rng.uniform(cfg.lo, cfg.hi, size=tuple(batch) + (cfg.N, 2))


def random_instance(rng, n_obs=3, extent=1.5):
    goal = np.r_[rng.uniform(-3, 3, 2), rng.uniform(-np.pi, np.pi)]
    obs = np.c_[rng.uniform(-extent, extent, (n_obs, 2)), rng.uniform(0, 0.5, n_obs)]
    return ProblemInstance(goal, obs)


def central_diff(f, x, h=1e-6):
    """Central differences of ``f`` (array-valued) over every entry of ``x``."""
    x = np.asarray(x, dtype=float)
    f0 = np.asarray(f(x))
    out = np.zeros(f0.shape + x.shape)
    for idx in np.ndindex(x.shape):
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        out[(Ellipsis,) + idx] = (np.asarray(f(xp)) - np.asarray(f(xm))) / (2 * h)
    return out


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return float(np.abs(a - b).max() / max(1.0, np.abs(b).max()))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def cfg5():
    return PlannerConfig(N=5)


@pytest.fixture
def acceptance_log(request):
    """Record one pass/fail line per acceptance criterion; printed after the run."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def log(criterion, passed, detail):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} - {detail}"
        lines.append(line)
        print(line)
        return passed

    return log


_ACCEPTANCE = pytest.StashKey[list]()


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
