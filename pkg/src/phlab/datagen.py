"""Trajectory data sets: sampling, noise, pairing and CSV persistence."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .systems import MassSpringSpec, simulate, system_from_dict, system_to_dict

__all__ = [
    "Trajectory",
    "TrajectoryDataset",
    "SamplePairs",
    "sample_initial_massspring",
    "sample_initial_tank",
    "sample_initial",
    "build_dataset",
    "pairs",
    "save_dataset",
    "load_dataset",
    "dataset_system",
]


@dataclass
class Trajectory:
    t: np.ndarray  # (n,)
    x: np.ndarray  # (n, d)

    def __len__(self) -> int:
        return len(self.t)


@dataclass
class TrajectoryDataset:
    trajectories: list[Trajectory]
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {tr.x.shape[1] for tr in self.trajectories}
        if len(dims) > 1:
            raise ValueError("trajectories have different state dimensions")
        for tr in self.trajectories:
            if len(tr.t) > 1 and np.any(np.diff(tr.t) <= 0):
                raise ValueError("sample times must be strictly increasing")

    def __len__(self) -> int:
        return len(self.trajectories)

    @property
    def dim(self) -> int:
        return self.trajectories[0].x.shape[1]

    @property
    def n_samples(self) -> int:
        return sum(len(tr) for tr in self.trajectories)

    def states(self) -> np.ndarray:
        return np.concatenate([tr.x for tr in self.trajectories])

    def times(self) -> np.ndarray:
        return np.concatenate([tr.t for tr in self.trajectories])


@dataclass
class SamplePairs:
    """Consecutive samples ``(x0, x1, t0, dt)`` stacked as arrays, one row per pair."""

    x0: np.ndarray
    x1: np.ndarray
    t0: np.ndarray
    dt: np.ndarray
    traj: np.ndarray

    def __len__(self) -> int:
        return len(self.t0)

    def subset(self, idx) -> "SamplePairs":
        return SamplePairs(self.x0[idx], self.x1[idx], self.t0[idx], self.dt[idx], self.traj[idx])


def sample_initial_massspring(rng: np.random.Generator, r_min: float = 1.0, r_max: float = 4.5) -> np.ndarray:
    r = rng.uniform(r_min, r_max)
    angle = rng.uniform(0.0, 2.0 * np.pi)
    return np.array([r * np.cos(angle), r * np.sin(angle)])


def sample_initial_tank(rng: np.random.Generator, d: int = 9) -> np.ndarray:
    return rng.uniform(-1.0, 1.0, size=d)


def sample_initial(system, rng: np.random.Generator) -> np.ndarray:
    if isinstance(system, MassSpringSpec):
        return sample_initial_massspring(rng)
    return sample_initial_tank(rng, system.dim)


def build_dataset(system, n_samples: int, traj_length: float, sample_dt: float, sigma: float = 0.0,
                  seed: int = 0, x0=None) -> TrajectoryDataset:
    """Simulate whole trajectories and add i.i.d. Gaussian measurement noise.

    ``n_samples`` counts state samples; the number of trajectories is
    ``n_samples // points_per_trajectory``. Trajectory ``i`` draws its initial
    condition and its noise from its own stream ``default_rng([seed, i])``.
    ``x0`` overrides the sampled initial conditions.
    """
    steps = int(round(traj_length / sample_dt))
    points = steps + 1
    if x0 is None:
        n_traj = n_samples // points
        if n_traj < 1:
            raise ValueError(f"{n_samples} samples do not fill one trajectory of {points} points")
    else:
        x0 = np.atleast_2d(np.asarray(x0, dtype=np.float64))
        n_traj = len(x0)
    rngs = [np.random.default_rng([seed, i]) for i in range(n_traj)]
    if x0 is None:
        x0 = np.stack([sample_initial(system, rng) for rng in rngs])
    times, states = simulate(system, x0, 0.0, steps * sample_dt, sample_dt)
    trajectories = []
    for i, rng in enumerate(rngs):
        x = states[:, i, :].copy()
        if sigma > 0:
            x = x + rng.normal(0.0, sigma, size=x.shape)
        trajectories.append(Trajectory(times.copy(), x))
    meta = {
        "system": system_to_dict(system),
        "sample_dt": sample_dt,
        "traj_length": traj_length,
        "sigma": sigma,
        "seed": seed,
        "n_samples": n_samples,
    }
    return TrajectoryDataset(trajectories, meta)


def pairs(dataset: TrajectoryDataset) -> SamplePairs:
    x0, x1, t0, dt, traj = [], [], [], [], []
    for i, tr in enumerate(dataset.trajectories):
        if len(tr) < 2:
            continue
        x0.append(tr.x[:-1])
        x1.append(tr.x[1:])
        t0.append(tr.t[:-1])
        dt.append(np.diff(tr.t))
        traj.append(np.full(len(tr) - 1, i))
    if not x0:
        d = dataset.dim if dataset.trajectories else 0
        empty = np.zeros((0, d))
        return SamplePairs(empty, empty.copy(), np.zeros(0), np.zeros(0), np.zeros(0, dtype=int))
    return SamplePairs(np.concatenate(x0), np.concatenate(x1), np.concatenate(t0), np.concatenate(dt),
                       np.concatenate(traj))


def save_dataset(dataset: TrajectoryDataset, path) -> None:
    """One JSON metadata line, then CSV rows ``traj_id,t,x_1,...,x_d`` (17 significant digits)."""
    d = dataset.dim
    with open(path, "w") as fh:
        fh.write(json.dumps(dataset.metadata) + "\n")
        fh.write(",".join(["traj_id", "t"] + [f"x_{i + 1}" for i in range(d)]) + "\n")
        for i, tr in enumerate(dataset.trajectories):
            for t, x in zip(tr.t, tr.x):
                fh.write(f"{i},{t:.17g}," + ",".join(f"{v:.17g}" for v in x) + "\n")


def load_dataset(path) -> TrajectoryDataset:
    with open(path) as fh:
        meta = json.loads(fh.readline())
        fh.readline()
        rows = np.loadtxt(fh, delimiter=",", ndmin=2)
    trajectories = []
    if rows.size:
        ids = rows[:, 0].astype(int)
        for i in np.unique(ids):
            block = rows[ids == i]
            trajectories.append(Trajectory(block[:, 1].copy(), block[:, 2:].copy()))
    return TrajectoryDataset(trajectories, meta)


def dataset_system(dataset: TrajectoryDataset):
    return system_from_dict(dataset.metadata["system"])
