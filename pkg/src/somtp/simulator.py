"""Closed-loop navigation: re-plan in the local frame, apply the first control.

A planner is any callable mapping a :class:`ProblemInstance` to an ``(N, 2)``
control sequence.  Collisions are judged with physical radii (robot radius
plus obstacle radius); the planning margin ``l_ex`` is not part of the body.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .dataset import DatasetError, atomic_write_text
from .objective import ProblemInstance
from .vehicle import PlannerConfig, step

SUITE_FORMAT = "somtp-tasks"
SUITE_VERSION = 1


def wrap_angle(a):
    """Map angles onto ``(-pi, pi]``."""
    w = np.mod(np.asarray(a, dtype=float) + np.pi, 2.0 * np.pi) - np.pi
    return np.where(w == -np.pi, np.pi, w)


@dataclass
class Task:
    start: np.ndarray
    goal: np.ndarray
    obstacles: np.ndarray = field(default_factory=lambda: np.zeros((0, 3)))
    target_radius: float = 0.3
    max_steps: int = 200

    def __post_init__(self):
        self.start = np.asarray(self.start, dtype=float).reshape(3)
        self.goal = np.asarray(self.goal, dtype=float).reshape(3)
        self.obstacles = np.asarray(self.obstacles, dtype=float).reshape(-1, 3)
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if not self.target_radius > 0:
            raise ValueError("target_radius must be positive")


@dataclass
class EpisodeResult:
    outcome: str
    steps: int
    final_distance: float
    states: np.ndarray
    controls: np.ndarray
    note: str = ""


def to_local_frame(world_pose, goal, obstacles) -> ProblemInstance:
    """Express goal and obstacles relative to ``world_pose`` (which becomes the origin)."""
    X, Y, phi = np.asarray(world_pose, dtype=float)
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, s], [-s, c]])
    goal = np.asarray(goal, dtype=float)
    obstacles = np.asarray(obstacles, dtype=float).reshape(-1, 3)
    g_xy = rot @ (goal[:2] - (X, Y))
    local_goal = np.array([g_xy[0], g_xy[1], float(wrap_angle(goal[2] - phi))])
    local_obs = obstacles.copy()
    if len(obstacles):
        local_obs[:, :2] = (obstacles[:, :2] - (X, Y)) @ rot.T
    return ProblemInstance(local_goal, local_obs)


def to_world_frame(world_pose, points) -> np.ndarray:
    """Inverse of the local transform for ``(..., 2)`` positions."""
    X, Y, phi = np.asarray(world_pose, dtype=float)
    c, s = math.cos(phi), math.sin(phi)
    rot = np.array([[c, -s], [s, c]])
    return np.asarray(points, dtype=float) @ rot.T + (X, Y)


def collides(x, obstacles, cfg: PlannerConfig) -> bool:
    if len(obstacles) == 0:
        return False
    d2 = ((obstacles[:, :2] - x[:2]) ** 2).sum(axis=1)
    return bool(np.any(d2 - (obstacles[:, 2] + cfg.R_robot) ** 2 <= 0))


def weighted_distance(x, goal, cfg: PlannerConfig) -> float:
    """Q-weighted norm of the pose error with the heading error wrapped."""
    e = np.asarray(x, dtype=float) - np.asarray(goal, dtype=float)
    e[2] = wrap_angle(e[2])
    return float(np.sqrt((np.asarray(cfg.Q) * e * e).sum()))


def run_task(task: Task, planner, cfg: PlannerConfig) -> EpisodeResult:
    x = task.start.copy()
    states, controls = [x.copy()], []
    outcome, note = "timeout", ""
    for k in range(task.max_steps + 1):
        if collides(x, task.obstacles, cfg):
            outcome = "collision"
            break
        if np.hypot(*(x[:2] - task.goal[:2])) <= task.target_radius:
            outcome = "success"
            break
        if k == task.max_steps:
            break
        try:
            u = np.asarray(planner(to_local_frame(x, task.goal, task.obstacles)), dtype=float)
            if u.shape != (cfg.N, 2) or not np.all(np.isfinite(u)):
                raise ValueError(f"planner returned invalid controls of shape {u.shape}")
        except Exception as exc:  # noqa: BLE001 - any planner failure ends the episode
            note = f"planner failure: {exc}"
            break
        u0 = np.clip(u[0], cfg.lo, cfg.hi)
        x = step(x, u0, cfg)
        states.append(x.copy())
        controls.append(u0)
    return EpisodeResult(
        outcome=outcome,
        steps=len(controls),
        final_distance=weighted_distance(x, task.goal, cfg),
        states=np.array(states),
        controls=np.array(controls).reshape(-1, 2),
        note=note,
    )


def score(results, cfg: PlannerConfig) -> tuple[float, float]:
    """``(success_rate, mean final weighted distance over successes)``; NaN distance if none succeed."""
    results = list(results)
    if not results:
        raise ValueError("cannot score an empty result list")
    wins = [r for r in results if r.outcome == "success"]
    dist = float(np.mean([r.final_distance for r in wins])) if wins else float("nan")
    return len(wins) / len(results), dist


def generate_tasks(
    n: int,
    n_obs: int,
    seed: int,
    cfg: PlannerConfig,
    goal_distance=(2.0, 4.0),
    heading_spread: float = math.pi / 6,
    lateral_spread: float = 1.2,
    r_range=(0.0, 0.5),
    target_radius: float = 0.3,
    max_steps: int = 200,
    max_resamples: int = 1000,
) -> list[Task]:
    """Waypoint tasks: start at the origin roughly facing the goal, arrive along the route.

    The goal heading equals the start-to-goal bearing and the start heading
    deviates from it by at most ``heading_spread``.  Obstacle centers sit
    along the route (uniform fraction of the way, plus a uniform lateral
    offset).  Each inflated obstacle stays off the straight start-goal
    segment, so a passable corridor always exists.
    """
    rng = np.random.default_rng(seed)
    clear = cfg.inflation
    tasks = []
    for _ in range(n):
        bearing = math.pi - rng.uniform(0.0, 2.0 * math.pi)
        dist = rng.uniform(*goal_distance)
        g = dist * np.array([math.cos(bearing), math.sin(bearing)])
        start = np.array([0.0, 0.0, float(wrap_angle(bearing + rng.uniform(-heading_spread, heading_spread)))])
        goal = np.array([g[0], g[1], bearing])
        normal = np.array([-math.sin(bearing), math.cos(bearing)])
        obs = np.zeros((n_obs, 3))
        for j in range(n_obs):
            for _ in range(max_resamples):
                c = rng.uniform(0.2, 0.8) * g + rng.uniform(-lateral_spread, lateral_spread) * normal
                r = rng.uniform(*r_range)
                # distance from the center to the segment [0, g]
                s_par = np.clip(c @ g / (g @ g), 0.0, 1.0)
                if np.hypot(*(c - s_par * g)) > r + clear:
                    break
            else:
                raise ValueError("could not place an obstacle clear of the route")
            obs[j] = (c[0], c[1], r)
        tasks.append(Task(start, goal, obs, target_radius, max_steps))
    return tasks


def _task_record(t: Task) -> dict:
    return {
        "start": [float(v) for v in t.start],
        "goal": [float(v) for v in t.goal],
        "obstacles": [[float(v) for v in row] for row in t.obstacles],
        "target_radius": float(t.target_radius),
        "max_steps": int(t.max_steps),
    }


def save_tasks(tasks, path, meta: dict | None = None) -> None:
    tasks = list(tasks)
    head = {"format": SUITE_FORMAT, "version": SUITE_VERSION, "config": meta, "n": len(tasks)}
    lines = [json.dumps(head, sort_keys=True)] + [json.dumps(_task_record(t)) for t in tasks]
    atomic_write_text(path, "\n".join(lines) + "\n")


def load_tasks(path) -> list[Task]:
    with open(path, encoding="utf-8") as fh:
        text = fh.read()
    if not text.endswith("\n"):
        raise DatasetError("task suite is truncated (missing final newline)")
    lines = text[:-1].split("\n")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable task suite header: {exc}") from exc
    if not isinstance(head, dict) or head.get("format") != SUITE_FORMAT:
        raise DatasetError("not a task suite file")
    if head.get("version") != SUITE_VERSION:
        raise DatasetError(f"task suite version {head.get('version')} unsupported (expected {SUITE_VERSION})")
    if len(lines) - 1 != head.get("n"):
        raise DatasetError(f"task suite header promises {head.get('n')} records, found {len(lines) - 1}")
    out = []
    for k, line in enumerate(lines[1:], start=2):
        try:
            d = json.loads(line)
            out.append(Task(d["start"], d["goal"], d["obstacles"], d["target_radius"], d["max_steps"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"corrupt task on line {k}: {exc}") from exc
    return out


def trace_csv(result: EpisodeResult) -> str:
    """``step,X,Y,phi,v,q`` rows; the final state has empty control columns."""
    rows = ["step,X,Y,phi,v,q"]
    for k, x in enumerate(result.states):
        u = result.controls[k] if k < len(result.controls) else None
        cols = [str(k)] + [repr(float(v)) for v in x] + ([repr(float(v)) for v in u] if u is not None else ["", ""])
        rows.append(",".join(cols))
    return "\n".join(rows) + "\n"


def solver_planner(cfg: PlannerConfig, scfg=None):
    from .solver import SolverConfig, solve

    scfg = scfg or SolverConfig()
    return lambda inst: solve(inst, cfg, scfg).u


def network_planner(net, cfg: PlannerConfig, correction=None):
    """Network forward pass followed by ``correction`` (an SlpgConfig, a Correction or None)."""
    from .evaluation import network_call

    if net.planner != cfg:
        raise ValueError("network was trained for a different planner config")
    return network_call(net, correction)
