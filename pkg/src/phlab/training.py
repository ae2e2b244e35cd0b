"""Mini-batch Adam training on discretized one-step residuals, and evaluation."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .datagen import SamplePairs, TrajectoryDataset, pairs
from .diffcore import AdamState, adam_step, value_and_grad
from .integrators import RolloutFailed, get_discretization, regularization_point, residual, rollout
from .models import PseudoHamiltonianModel, adjusted_force, build_model, save_checkpoint

__all__ = [
    "TrainingDiverged",
    "TrainConfig",
    "TrainReport",
    "parse_lambda_schedule",
    "lambda_at",
    "loss",
    "loss_value",
    "train",
    "evaluate",
]


class TrainingDiverged(RuntimeError):
    def __init__(self, epoch: int):
        super().__init__(f"non-finite loss in epoch {epoch}")
        self.epoch = epoch


def parse_lambda_schedule(text: str) -> list[tuple[int, float]]:
    """``"0:0.3,150:0.1"`` -> ``[(0, 0.3), (150, 0.1)]``."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        epoch, lam = part.split(":")
        out.append((int(epoch), float(lam)))
    return out


def lambda_at(schedule, epoch: int) -> float:
    lam = 0.0
    for start, value in schedule:
        if epoch >= start:
            lam = value
    return lam


@dataclass
class TrainConfig:
    model: dict
    epochs: int = 100
    batch_size: int = 32
    lr: float = 1e-3
    integrator: str = "midpoint"
    lambda_schedule: list = field(default_factory=lambda: [(0, 0.0)])
    seed: int = 0

    def __post_init__(self):
        get_discretization(self.integrator)
        self.lambda_schedule = [(int(e), float(v)) for e, v in self.lambda_schedule]
        starts = [e for e, _ in self.lambda_schedule]
        if starts != sorted(starts):
            raise ValueError("lambda schedule epochs must be non-decreasing")
        if any(v < 0 for _, v in self.lambda_schedule):
            raise ValueError("lambda must be non-negative")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch size must be positive and epochs non-negative")

    def seeds(self) -> tuple[np.random.Generator, np.random.Generator]:
        """Independent (initialization, shuffling) generators derived from ``seed``."""
        init, shuffle = np.random.SeedSequence(self.seed).spawn(2)
        return np.random.default_rng(init), np.random.default_rng(shuffle)


@dataclass
class TrainReport:
    train_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    damping: list[list[float]] = field(default_factory=list)
    wall_clock: float = 0.0
    checkpoint: str | None = None

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(asdict(self), indent=2))


def _objective(model, batch: SamplePairs, disc, lam: float, n_total: int):
    x0, x1 = batch.x0, batch.x1
    t0, dt = batch.t0[:, None], batch.dt[:, None]
    xm, tm = regularization_point(disc, x0, x1, t0, dt)
    use_force = lam > 0 and getattr(model, "force", None) is not None

    def expr(p):
        g = lambda x, t: model.rhs(x, t, p)
        r = residual(disc, g, x0, x1, t0, dt)
        value = (r * r).mean()
        if use_force:
            value = value + (lam / n_total) * model.regularized_force(xm, tm, p).mean()
        return value

    return expr


def loss(model, batch: SamplePairs, disc, lam: float = 0.0, n_total: int | None = None):
    """Batch loss and its flat parameter gradient.

    ``mean ||residual||^2 / d + (lam / n_total) * mean ||f(x_mid, t_mid)||_1``.
    """
    n_total = len(batch) if n_total is None else n_total
    value, grad = value_and_grad(_objective(model, batch, disc, lam, n_total), model.params)
    return float(value), grad


def loss_value(model, batch: SamplePairs, disc, lam: float = 0.0, n_total: int | None = None,
               chunk: int = 4096) -> float:
    """Loss without gradients, evaluated in chunks (exact mean over the whole set)."""
    n_total = len(batch) if n_total is None else n_total
    total, count = 0.0, 0
    p = model.params.views()
    for start in range(0, len(batch), chunk):
        part = batch.subset(slice(start, start + chunk))
        total += float(_objective(model, part, disc, lam, n_total)(p)) * len(part)
        count += len(part)
    return total / count


def train(config: TrainConfig, dataset: TrajectoryDataset | SamplePairs, validation=None, model=None,
          checkpoint=None, log_every: int = 0) -> tuple[object, TrainReport]:
    """Shuffled mini-batch Adam over all sample pairs; returns ``(model, report)``.

    ``model`` overrides building a fresh one from ``config.model``.
    """
    start_time = time.perf_counter()
    init_rng, shuffle_rng = config.seeds()
    if model is None:
        model = build_model(config.model, seed=init_rng)
    train_pairs = dataset if isinstance(dataset, SamplePairs) else pairs(dataset)
    if len(train_pairs) == 0:
        raise ValueError("training set has no sample pairs")
    val_pairs = None
    if validation is not None:
        val_pairs = validation if isinstance(validation, SamplePairs) else pairs(validation)
    disc = get_discretization(config.integrator)
    n_total = len(train_pairs)
    state = AdamState.zeros(len(model.params))
    report = TrainReport()
    for epoch in range(config.epochs):
        lam = lambda_at(config.lambda_schedule, epoch)
        order = shuffle_rng.permutation(n_total)
        epoch_loss = 0.0
        for start in range(0, n_total, config.batch_size):
            batch = train_pairs.subset(order[start : start + config.batch_size])
            value, grad = loss(model, batch, disc, lam, n_total)
            if not np.isfinite(value) or not np.all(np.isfinite(grad)):
                raise TrainingDiverged(epoch)
            theta, state = adam_step(model.params.data, grad, state, config.lr)
            model.params.assign(theta)
            epoch_loss += value * len(batch)
        report.train_loss.append(epoch_loss / n_total)
        if val_pairs is not None and len(val_pairs):
            report.val_loss.append(loss_value(model, val_pairs, disc, 0.0))
        report.damping.append([float(v) for v in model.damping])
        if log_every and (epoch + 1) % log_every == 0:
            print(f"epoch {epoch + 1}: loss {report.train_loss[-1]:.4e} damping {np.round(model.damping, 4)}",
                  flush=True)
    report.wall_clock = time.perf_counter() - start_time
    if checkpoint is not None:
        save_checkpoint(model, checkpoint)
        report.checkpoint = str(checkpoint)
    return model, report


def _test_trajectories(test):
    trajs = test.trajectories if isinstance(test, TrajectoryDataset) else list(test)
    if not trajs:
        raise ValueError("evaluation needs at least one test trajectory")
    return trajs


def evaluate(model, test, solver: str = "rk4", system=None, grid=None, substeps: int = 1) -> dict:
    """Rollout MSE over test trajectories, plus structure errors when ``system`` is known.

    Each trajectory is rolled out from its first sample over its full horizon
    at its own sample spacing (``substeps`` solver steps per sample).
    Diverged rollouts are counted and excluded.
    """
    trajs = _test_trajectories(test)
    sq_err, diverged = [], 0
    for tr in trajs:
        dt = float(tr.t[1] - tr.t[0])
        try:
            _, pred = rollout(model, tr.x[0], float(tr.t[0]), float(tr.t[-1]), dt, solver, substeps)
        except RolloutFailed:
            diverged += 1
            continue
        sq_err.append(np.mean((pred - tr.x) ** 2))
    metrics = {
        "mse": float(np.mean(sq_err)) if sq_err else float("nan"),
        "n_diverged": diverged,
        "n_trajectories": len(trajs),
    }
    if system is not None and isinstance(model, PseudoHamiltonianModel):
        points = np.concatenate([tr.x for tr in trajs]) if grid is None else np.asarray(grid, dtype=np.float64)
        times = np.concatenate([tr.t for tr in trajs]) if grid is None else np.zeros(len(points))
        gh = np.asarray(model.grad_hamiltonian(points))
        metrics["grad_h_mse"] = float(np.mean((gh - system.grad_hamiltonian(points)) ** 2))
        true_r = system.damping_values
        if len(model.damped) == len(true_r):
            metrics["damping_abs_error"] = float(np.mean(np.abs(model.damping - true_r)))
            metrics["damping_relative"] = float(np.mean(model.damping / true_r))
        if model.force is not None and list(model.force.mask) == list(system.force_indices):
            learned = adjusted_force(model, points, times)
            exact = system.external_force(points, times)
            exact = exact - exact.mean(axis=0, keepdims=True)
            metrics["force_mse"] = float(np.mean((learned - exact) ** 2))
    return metrics
