"""Random planning instances in the robot's local frame, splits and storage.

Files are line-delimited JSON: one header record carrying the format name,
version, generator config and record count, then one record per instance.
Python's shortest round-trip float repr keeps every value bit-exact.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .objective import ProblemInstance

FORMAT = "somtp-dataset"
VERSION = 1


class DatasetError(ValueError):
    """Raised for corrupt, truncated or incompatible dataset files."""


@dataclass(frozen=True)
class DatasetConfig:
    n_instances: int = 20000
    seed: int = 0
    half_extent: float = 3.0
    n_obs: int = 3
    r_lo: float = 0.0
    r_hi: float = 0.5
    goal_bounds: tuple[float, float] = (-3.0, 3.0)
    split_ratio: tuple[float, float, float] = (0.9, 0.05, 0.05)
    # obstacles must clear the start by their radius plus this margin
    start_clearance: float = 0.4
    max_resamples: int = 1000

    def __post_init__(self):
        object.__setattr__(self, "goal_bounds", tuple(float(v) for v in self.goal_bounds))
        object.__setattr__(self, "split_ratio", tuple(float(v) for v in self.split_ratio))
        if self.n_instances < 0 or self.n_obs < 0:
            raise ValueError("n_instances and n_obs must be nonnegative")
        if not self.half_extent > 0:
            raise ValueError("half_extent must be positive")
        if not 0 <= self.r_lo <= self.r_hi:
            raise ValueError("radius range must satisfy 0 <= r_lo <= r_hi")
        if len(self.goal_bounds) != 2 or not self.goal_bounds[0] < self.goal_bounds[1]:
            raise ValueError("goal_bounds must be (low, high) with low < high")
        _check_ratio(self.split_ratio)
        if abs(sum(self.split_ratio) - 1.0) > 1e-9:
            raise ValueError("split_ratio must sum to 1")
        if self.start_clearance < 0 or self.max_resamples < 1:
            raise ValueError("start_clearance must be >= 0 and max_resamples >= 1")

    def to_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items() if k in names})


def _check_ratio(ratio):
    if len(ratio) != 3 or min(ratio) < 0 or not sum(ratio) > 0:
        raise ValueError("split ratio needs three nonnegative parts with a positive sum")


def generate(dcfg: DatasetConfig) -> list[ProblemInstance]:
    """Draw ``n_instances`` instances; every obstacle leaves the start pose strictly safe."""
    rng = np.random.default_rng(dcfg.seed)
    lo, hi = dcfg.goal_bounds
    e = dcfg.half_extent
    out = []
    for _ in range(dcfg.n_instances):
        xy = rng.uniform(lo, hi, size=2)
        # uniform on (-pi, pi]
        phi = math.pi - rng.uniform(0.0, 2.0 * math.pi)
        obs = np.zeros((dcfg.n_obs, 3))
        for j in range(dcfg.n_obs):
            for _ in range(dcfg.max_resamples):
                c = rng.uniform(-e, e, size=2)
                r = rng.uniform(dcfg.r_lo, dcfg.r_hi)
                if c @ c - (r + dcfg.start_clearance) ** 2 > 0:
                    break
            else:
                raise ValueError(f"no start-safe obstacle after {dcfg.max_resamples} draws; check the config")
            obs[j] = (c[0], c[1], r)
        out.append(ProblemInstance(np.array([xy[0], xy[1], phi]), obs))
    return out


def split_sizes(n: int, ratio) -> tuple[int, int, int]:
    ratio = tuple(float(v) for v in ratio)
    _check_ratio(ratio)
    total = sum(ratio)
    n_test = math.floor(n * ratio[1] / total + 1e-9)
    n_val = math.floor(n * ratio[2] / total + 1e-9)
    return n - n_test - n_val, n_test, n_val


def split(instances, ratio=(18, 1, 1), seed: int = 0):
    """Seeded permutation cut into ``(train, test, val)``; test and val sizes round down."""
    instances = list(instances)
    n_train, n_test, _ = split_sizes(len(instances), ratio)
    perm = np.random.default_rng(seed).permutation(len(instances))
    pick = [instances[i] for i in perm]
    return pick[:n_train], pick[n_train : n_train + n_test], pick[n_train + n_test :]


def _record(inst: ProblemInstance) -> dict:
    return {"goal": [float(v) for v in inst.x_go], "obstacles": [[float(v) for v in row] for row in inst.obstacles]}


def dumps(instances, dcfg: DatasetConfig | None = None) -> str:
    instances = list(instances)
    head = {"format": FORMAT, "version": VERSION, "config": dcfg.to_dict() if dcfg else None, "n": len(instances)}
    lines = [json.dumps(head, sort_keys=True)] + [json.dumps(_record(i)) for i in instances]
    return "\n".join(lines) + "\n"


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)
    os.replace(tmp, path)


def save(instances, path, dcfg: DatasetConfig | None = None) -> None:
    atomic_write_text(path, dumps(instances, dcfg))


def loads(text: str) -> tuple[list[ProblemInstance], dict]:
    """Parse dataset text; returns the instances and the header record."""
    if not text.endswith("\n"):
        raise DatasetError("dataset file is truncated (missing final newline)")
    lines = text[:-1].split("\n")
    try:
        head = json.loads(lines[0])
    except json.JSONDecodeError as exc:
        raise DatasetError(f"unreadable dataset header: {exc}") from exc
    if not isinstance(head, dict) or head.get("format") != FORMAT:
        raise DatasetError("not a dataset file")
    if head.get("version") != VERSION:
        raise DatasetError(f"dataset version {head.get('version')} unsupported (expected {VERSION})")
    body = lines[1:]
    if len(body) != head.get("n"):
        raise DatasetError(f"dataset header promises {head.get('n')} records, found {len(body)}")
    out = []
    for k, line in enumerate(body, start=2):
        try:
            rec = json.loads(line)
            out.append(ProblemInstance(np.array(rec["goal"], dtype=float), np.array(rec["obstacles"], dtype=float).reshape(-1, 3)))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DatasetError(f"corrupt record on line {k}: {exc}") from exc
    return out, head


def load(path) -> list[ProblemInstance]:
    return loads(Path(path).read_text(encoding="utf-8"))[0]


def load_with_header(path) -> tuple[list[ProblemInstance], dict]:
    return loads(Path(path).read_text(encoding="utf-8"))
