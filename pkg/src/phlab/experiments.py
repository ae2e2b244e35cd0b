"""End-to-end experiment drivers for the mass-spring and tank benchmarks.

Each driver trains replicate models, evaluates them on held-out trajectories
and appends long-format rows to a :class:`ResultTable`. Curves (trajectories,
force curves, Hamiltonian contour grids) go to ``<out_dir>/curves/*.csv``.
"""

from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datagen import TrajectoryDataset, build_dataset
from .diffcore import value_of
from .integrators import rollout
from .models import (
    PseudoHamiltonianModel,
    adjusted_force,
    adjusted_hamiltonian,
    canonical_structure,
    planted_model,
    remove_force,
    replace_force,
)
from .mpc import ControlSpec, run_closed_loop, steady_levels
from .systems import LeakForce, MassSpringSpec, TankNetworkSpec
from .training import TrainConfig, TrainingDiverged, evaluate, train

__all__ = [
    "EXPERIMENT_IDS",
    "ExperimentSpec",
    "ResultTable",
    "config_hash",
    "msd_model_descriptor",
    "tank_phnn_descriptor",
    "run_msd_suite",
    "run_tank_integrators",
    "run_tank_datasize",
    "run_tank_leak",
    "run_tank_mpc",
    "leak_force_curves",
    "emit_contour_grid",
    "run_experiment",
]

EXPERIMENT_IDS = (
    "msd-datasize", "msd-trajectory", "msd-hamiltonian", "msd-damping", "msd-force", "msd-freq",
    "tank-integrators", "tank-datasize", "tank-hamiltonian", "tank-leak", "tank-mpc",
)

OMEGA_GRID = (0.5, 1.0, 2.0, 3.0, 4.0, 6.0, 9.0)
TANK_X0 = np.array([-1.0, -1.0, 0.0, 0.5, -1.0, 1.0, 1.0, -0.5, -1.0])


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:12]


@dataclass
class ExperimentSpec:
    id: str
    replicates: int | None = None
    scale: str = "desk"
    overrides: dict = field(default_factory=dict)
    out_dir: str | None = None
    seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.id not in EXPERIMENT_IDS:
            raise ValueError(f"unknown experiment {self.id!r}; choose from {EXPERIMENT_IDS}")
        if self.scale not in ("desk", "paper"):
            raise ValueError("scale must be 'desk' or 'paper'")
        if self.replicates is None:
            self.replicates = 3 if self.scale == "desk" else 10

    def setting(self, name: str, desk, paper):
        return self.overrides.get(name, desk if self.scale == "desk" else paper)

    def curve_path(self, name: str) -> Path | None:
        if self.out_dir is None:
            return None
        path = Path(self.out_dir) / "curves"
        path.mkdir(parents=True, exist_ok=True)
        return path / name


class ResultTable:
    """Append-only long-format results: one row per (experiment, model, size, replicate, metric)."""

    columns = ("experiment", "model", "size", "replicate", "metric", "value", "config_hash")

    def __init__(self):
        self.rows: list[dict] = []

    def __len__(self) -> int:
        return len(self.rows)

    def add(self, experiment, model, size, replicate, metric, value, config) -> None:
        self.rows.append({
            "experiment": experiment, "model": model, "size": size, "replicate": replicate,
            "metric": metric, "value": float(value), "config_hash": config_hash(config),
        })

    def extend(self, other: "ResultTable") -> None:
        self.rows.extend(other.rows)

    def values(self, model=None, metric=None, size=None, experiment=None) -> np.ndarray:
        return np.array([r["value"] for r in self.rows
                         if (model is None or r["model"] == model) and (metric is None or r["metric"] == metric)
                         and (size is None or r["size"] == size)
                         and (experiment is None or r["experiment"] == experiment)])

    def summary(self) -> list[dict]:
        """Mean and std over the replicate dimension only."""
        groups: dict[tuple, list[float]] = {}
        for r in self.rows:
            groups.setdefault((r["experiment"], r["model"], r["size"], r["metric"]), []).append(r["value"])
        out = []
        for (exp, model, size, metric), vals in sorted(groups.items(), key=lambda kv: str(kv[0])):
            arr = np.asarray(vals, dtype=np.float64)
            finite = arr[np.isfinite(arr)]
            out.append({"experiment": exp, "model": model, "size": size, "metric": metric,
                        "mean": float(finite.mean()) if finite.size else float("nan"),
                        "std": float(finite.std()) if finite.size else float("nan"),
                        "n": int(arr.size)})
        return out

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns)
            w.writeheader()
            for r in self.rows:
                w.writerow({**r, "value": f"{r['value']:.17g}"})

    def write(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        self.to_csv(out / "results.csv")
        (out / "report.json").write_text(json.dumps(self.summary(), indent=2))


def _write_csv(path, header, rows) -> None:
    if path is None:
        return
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for row in rows:
            w.writerow([f"{v:.17g}" if isinstance(v, (float, np.floating)) else v for v in row])


def _run_jobs(fn, jobs, workers: int):
    if workers <= 1:
        return [fn(job) for job in jobs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, jobs))


# ---------------------------------------------------------------------------
# model descriptors
# ---------------------------------------------------------------------------


def msd_model_descriptor(kind: str) -> dict:
    """``baseline1`` (one net on (x, t)), ``baseline2`` (state net + time net),
    ``phnn-qpt`` (force on (q, p, t)) or ``phnn-t`` (force on t only)."""
    if kind == "baseline1":
        return {"kind": "baseline", "variant": "one-net", "dim": 2}
    if kind == "baseline2":
        return {"kind": "baseline", "variant": "two-net", "dim": 2}
    mode = {"phnn-qpt": "state_time", "phnn-t": "time"}[kind]
    return {"kind": "phnn", "dim": 2, "S": canonical_structure().tolist(), "damped": [1],
            "force_mode": mode, "force_mask": [1]}


def tank_phnn_descriptor(system: TankNetworkSpec, force_tanks=(3,)) -> dict:
    """PHNN for the tank network with damping on the pipes and a state-only force on ``force_tanks``."""
    desc = {"kind": "phnn", "dim": system.dim, "S": system.structure().tolist(),
            "damped": system.damped_indices, "force_mode": None, "force_mask": None}
    if force_tanks:
        desc["force_mode"] = "state"
        desc["force_mask"] = [system.n_pipes + j for j in force_tanks]
    return desc


def _train_job(job):
    config, dataset = job["config"], job["dataset"]
    try:
        model, report = train(TrainConfig(**config), dataset)
        return model, report, None
    except TrainingDiverged as exc:
        return None, None, exc.epoch


# ---------------------------------------------------------------------------
# mass-spring
# ---------------------------------------------------------------------------


def run_msd_suite(spec: ExperimentSpec, sizes=None, kinds=None, frequency_study=None, curves=None) -> ResultTable:
    """Four model types across data-set sizes and replicates on the forced, damped mass-spring."""
    system = MassSpringSpec()
    sizes = sizes or spec.setting("sizes", [1000, 2000, 5000, 10000], [1000, 2000, 5000, 10000, 20000])
    kinds = kinds or spec.setting("models", ["baseline1", "baseline2", "phnn-qpt", "phnn-t"],
                                  ["baseline1", "baseline2", "phnn-qpt", "phnn-t"])
    epochs = spec.setting("epochs", 2000, 20000)
    lam = spec.setting("lambda", 0.1, 0.1)
    integrator = spec.setting("integrator", "midpoint", "midpoint")
    n_test = spec.setting("test_trajectories", 10, 10)
    freq_size = spec.setting("frequency_size", 10000, 10000)
    frequency_study = spec.id == "msd-freq" if frequency_study is None else frequency_study
    curves = spec.id in ("msd-trajectory", "msd-hamiltonian", "msd-force") if curves is None else curves
    test = build_dataset(system, n_test * 1001, 10.0, 0.01, 0.0, seed=spec.seed + 10_000)
    table = ResultTable()
    for size in sizes:
        data = build_dataset(system, size, 10.0, 0.01, 0.0, seed=spec.seed + size)
        jobs = []
        for kind in kinds:
            for rep in range(spec.replicates):
                config = {"model": msd_model_descriptor(kind), "epochs": epochs, "batch_size": 32,
                          "lr": 1e-3, "integrator": integrator,
                          "lambda_schedule": [(0, lam if kind.startswith("phnn") else 0.0)],
                          "seed": spec.seed + rep}
                jobs.append({"config": config, "dataset": data, "kind": kind, "rep": rep})
        results = _run_jobs(_train_job, jobs, spec.workers)
        for job, (model, report, failed_epoch) in zip(jobs, results):
            kind, rep, config = job["kind"], job["rep"], job["config"]
            if model is None:
                table.add(spec.id, kind, size, rep, "diverged_epoch", failed_epoch, config)
                continue
            metrics = evaluate(model, test, "rk4", system)
            for name, value in metrics.items():
                table.add(spec.id, kind, size, rep, name, value, config)
            if kind.startswith("phnn"):
                table.add(spec.id, kind, size, rep, "damping", model.damping[0], config)
            if curves:
                _msd_curves(spec, model, kind, size, rep, test, system)
            if frequency_study and kind.startswith("phnn") and size == freq_size:
                for omega, mse in frequency_replacement(model, test, OMEGA_GRID).items():
                    table.add(spec.id, kind, size, rep, f"mse_omega_{omega:g}", mse, config)
    return table


def frequency_replacement(model: PseudoHamiltonianModel, test, omegas=OMEGA_GRID) -> dict[float, float]:
    """Rollout MSE on ``test`` (trajectories of the system forced with sin(omega t)) after
    replacing the learned force by ``sin(omega t)``, for each ``omega``.

    The learned force is only determined up to a constant, which the learned
    Hamiltonian balances with a term linear in q. The replacement keeps that
    constant, measured as the mean gap between the learned force and the
    training force over the test samples.
    """
    out = {}
    base = MassSpringSpec()
    x0 = np.stack([tr.x[0] for tr in test.trajectories])
    xs = np.concatenate([tr.x for tr in test.trajectories])
    ts = np.concatenate([tr.t for tr in test.trajectories])
    offset = np.mean(value_of(model.force_values(xs, ts)) - base.force(ts)[:, None], axis=0)
    for omega in omegas:
        forced = MassSpringSpec(base.m, base.k, base.c, base.force_amplitude, omega)
        ref = build_dataset(forced, 0, 10.0, 0.01, 0.0, x0=x0)
        variant = replace_force(model, lambda x, t, w=omega: np.sin(w * np.asarray(t, dtype=np.float64)) + offset)
        out[omega] = evaluate(variant, ref, "rk4")["mse"]
    return out


def _msd_curves(spec, model, kind, size, rep, test, system) -> None:
    tr = test.trajectories[0]
    _, pred = rollout(model, tr.x[0], tr.t[0], tr.t[-1], tr.t[1] - tr.t[0])
    _write_csv(spec.curve_path(f"msd_trajectory_{kind}_{size}_{rep}.csv"), ["t", "q", "p", "q_hat", "p_hat"],
               [(t, *x, *xh) for t, x, xh in zip(tr.t, tr.x, pred)])
    if isinstance(model, PseudoHamiltonianModel):
        axis = np.linspace(-4.5, 4.5, 101)
        emit_contour_grid(model, (0, 1), (axis, axis), spec.curve_path(f"msd_hamiltonian_{kind}_{size}_{rep}.csv"))
        f_adj = adjusted_force(model, tr.x, tr.t)[:, 0]
        exact = system.force(tr.t)
        _write_csv(spec.curve_path(f"msd_force_{kind}_{size}_{rep}.csv"), ["t", "f_adjusted", "f_exact_adjusted"],
                   zip(tr.t, f_adj, exact - exact.mean()))


# ---------------------------------------------------------------------------
# tank network
# ---------------------------------------------------------------------------


def _tank_test_set(system, seed: int, n: int = 10, dt: float = 0.01) -> TrajectoryDataset:
    return build_dataset(system, n * (int(round(1.0 / dt)) + 1), 1.0, dt, 0.0, seed=seed)


def run_tank_integrators(spec: ExperimentSpec, datasets=None, integrators=None) -> ResultTable:
    """Friction recovery and rollout MSE for PHNNs trained with each discretization.

    ``datasets`` is a list of ``(sample_dt, n_samples, sigma, epochs)``. The
    network runs at ``g = 9.81`` here (setting ``g``): the fast pipe modes are
    what separates the discretizations at coarse sampling.
    """
    g = spec.setting("g", 9.81, 9.81)
    system = TankNetworkSpec(g=g, leaks=[LeakForce(3, -10.0, 0.3)])
    integrators = integrators or spec.setting("integrators", ["euler", "rk4", "midpoint", "srk4"],
                                              ["euler", "rk4", "midpoint", "srk4"])
    if datasets is None:
        desk = [(1 / 30, 3000, s, 1000) for s in (0.0, 0.03, 0.05)] + \
               [(1 / 100, 30000, s, 100) for s in (0.0, 0.03, 0.05)]
        paper = [(1 / 30, 3000, s, 1000) for s in (0.0, 0.03, 0.05)] + \
                [(1 / 100, 30000, s, 1000) for s in (0.0, 0.03, 0.05)]
        datasets = spec.setting("datasets", desk, paper)
    test = _tank_test_set(system, spec.seed + 10_000)
    table = ResultTable()
    for sample_dt, n_samples, sigma, epochs in datasets:
        data = build_dataset(system, n_samples, 1.0, sample_dt, sigma, seed=spec.seed + n_samples)
        label = f"dt={sample_dt:.4g},n={n_samples},sigma={sigma:g}"
        jobs = []
        for integrator in integrators:
            for rep in range(spec.replicates):
                config = {"model": tank_phnn_descriptor(system), "epochs": epochs, "batch_size": 32, "lr": 1e-3,
                          "integrator": integrator, "lambda_schedule": [(0, 0.0)], "seed": spec.seed + rep}
                jobs.append({"config": config, "dataset": data, "integrator": integrator, "rep": rep})
        results = _run_jobs(_train_job, jobs, spec.workers)
        for job, (model, report, failed_epoch) in zip(jobs, results):
            integrator, rep, config = job["integrator"], job["rep"], job["config"]
            if model is None:
                table.add(spec.id, integrator, label, rep, "diverged_epoch", failed_epoch, config)
                continue
            rel = model.damping / system.R_p
            for i, r in enumerate(rel):
                table.add(spec.id, integrator, label, rep, f"relative_friction_{i + 1}", r, config)
            table.add(spec.id, integrator, label, rep, "relative_friction_mean", rel.mean(), config)
            for name, value in evaluate(model, test, "rk4", system).items():
                table.add(spec.id, integrator, label, rep, name, value, config)
            if spec.out_dir is not None:
                _, pred = rollout(model, TANK_X0, 0.0, 1.0, 0.01)
                _write_csv(spec.curve_path(f"tank_mu4_{integrator}_{label}_{rep}.csv".replace("=", "")),
                           ["t", "mu4_hat"], zip(np.linspace(0, 1, 101), pred[:, 8]))
    return table


def run_tank_datasize(spec: ExperimentSpec, sizes=None) -> ResultTable:
    """Baseline vs PHNN (force on tank 4) on the tank network across data-set sizes."""
    system = TankNetworkSpec(leaks=[LeakForce(3, -10.0, 0.3)])
    sizes = sizes or spec.setting("sizes", [500, 2500, 10000], [100, 250, 500, 1000, 2500, 5000, 10000, 20000])
    epochs = spec.setting("epochs", 2000, 20000)
    integrator = spec.setting("integrator", "midpoint", "midpoint")
    test = _tank_test_set(system, spec.seed + 10_000)
    validation = build_dataset(system, 505, 1.0, 0.01, 0.0, seed=spec.seed + 20_000)
    table = ResultTable()
    best: tuple[float, PseudoHamiltonianModel | None] = (np.inf, None)
    for size in sizes:
        data = build_dataset(system, size, 1.0, 0.01, 0.0, seed=spec.seed + size)
        for kind in ("baseline", "phnn"):
            desc = tank_phnn_descriptor(system) if kind == "phnn" else \
                {"kind": "baseline", "variant": "one-net", "dim": system.dim, "autonomous": True}
            for rep in range(spec.replicates):
                config = {"model": desc, "epochs": epochs, "batch_size": 256, "lr": 1e-3,
                          "integrator": integrator, "lambda_schedule": [(0, 0.0)], "seed": spec.seed + rep}
                try:
                    model, report = train(TrainConfig(**config), data, validation)
                except TrainingDiverged as exc:
                    table.add(spec.id, kind, size, rep, "diverged_epoch", exc.epoch, config)
                    continue
                metrics = evaluate(model, test, "rk4", system)
                for name, value in metrics.items():
                    table.add(spec.id, kind, size, rep, name, value, config)
                if kind == "phnn" and metrics["grad_h_mse"] < best[0]:
                    best = (metrics["grad_h_mse"], model)
    if best[1] is not None and (spec.id == "tank-hamiltonian" or spec.out_dir is not None):
        tank_contours(spec, best[1])
    return table


def tank_contours(spec: ExperimentSpec, model: PseudoHamiltonianModel, n: int = 101) -> None:
    axis = np.linspace(-1.0, 1.0, n)
    names = [f"phi{i + 1}" for i in range(5)] + [f"mu{j + 1}" for j in range(4)]
    for i in range(model.dim):
        for j in range(i + 1, model.dim):
            emit_contour_grid(model, (i, j), (axis, axis), spec.curve_path(f"tank_hamiltonian_{names[i]}_{names[j]}.csv"))


def leak_force_curves(model: PseudoHamiltonianModel, grid=None) -> tuple[np.ndarray, np.ndarray]:
    """Learned force on each masked tank as a function of that tank's level, others at zero.

    Returns ``(grid, values)`` with ``values[k, :]`` for ``model.force.mask[k]``.
    """
    grid = np.linspace(-1.0, 1.0, 201) if grid is None else np.asarray(grid, dtype=np.float64)
    values = np.zeros((len(model.force.mask), grid.size))
    for k, idx in enumerate(model.force.mask):
        x = np.zeros((grid.size, model.dim))
        x[:, idx] = grid
        values[k] = np.asarray(model.force_values(x, 0.0))[:, k]
    return grid, values


LEAK_SCENARIOS = ("a", "b", "c", "c-known", "d", "d-known")


def leak_scenario(name: str, spec: ExperimentSpec) -> dict:
    """Data, mask and training protocol of one leak scenario."""
    one = [LeakForce(3, -30.0, 0.3)]
    two = one + [LeakForce(0, -10.0, 0.3)]
    fast = name in ("a", "b")
    leaks = two if name.startswith("d") else one
    known = name == "b" or name.endswith("known")
    if fast:
        data = {"n_traj": spec.setting("leak_trajectories", 300, 300), "dt": 1 / 400, "sigma": 0.0}
        integrator = "midpoint"
        if known:
            epochs, schedule = spec.setting("leak_known_epochs", 30, 30), [(0, 0.0)]
        else:
            epochs = spec.setting("leak_epochs", 60, 600)
            step = epochs // 4
            schedule = [(0, 0.3), (step, 0.1), (2 * step, 0.03), (3 * step, 0.01)]
    else:
        data = {"n_traj": spec.setting("noisy_trajectories", 1000, 1000), "dt": 1 / 100, "sigma": 0.01}
        integrator = "srk4"
        epochs = spec.setting("noisy_epochs", 200, 2000)
        step = epochs // 4
        schedule = [(0, 0.3), (step, 0.1), (2 * step, 0.03), (3 * step, 0.01)]
        if known:
            schedule = [(0, 0.0)]
    tanks = sorted(lk.tank for lk in leaks) if known else [0, 1, 2, 3]
    return {"leaks": leaks, "data": data, "integrator": integrator, "epochs": epochs, "schedule": schedule,
            "force_tanks": tanks}


def train_leak_model(scenario: dict, seed: int = 0, leaks=None):
    """Train a PHNN on data from the tank network with ``scenario['leaks']`` (or ``leaks``)."""
    leaks = scenario["leaks"] if leaks is None else leaks
    system = TankNetworkSpec(leaks=leaks)
    d = scenario["data"]
    steps = int(round(1.0 / d["dt"]))
    data = build_dataset(system, d["n_traj"] * (steps + 1), 1.0, d["dt"], d["sigma"], seed=seed + 500)
    config = TrainConfig(model=tank_phnn_descriptor(system, scenario["force_tanks"]), epochs=scenario["epochs"],
                         batch_size=32, integrator=scenario["integrator"],
                         lambda_schedule=scenario["schedule"], seed=seed)
    model, report = train(config, data)
    return model, report, config


def removal_mse(model: PseudoHamiltonianModel, seed: int = 0, n: int = 10, horizon: float = 1.0,
                strip_force: bool = True) -> float:
    """Rollout MSE against the leak-free tank network, optionally after dropping the force network."""
    clean = TankNetworkSpec()
    test = build_dataset(clean, n * 101 * int(round(horizon)), horizon, 0.01, 0.0, seed=seed)
    candidate = remove_force(model) if strip_force and model.force is not None else model
    return evaluate(candidate, test, "rk4")["mse"]


def run_tank_leak(spec: ExperimentSpec, scenarios=None) -> ResultTable:
    scenarios = scenarios or spec.setting("scenarios", list(LEAK_SCENARIOS), list(LEAK_SCENARIOS))
    table = ResultTable()
    grid = np.linspace(-1.0, 1.0, 201)
    for name in scenarios:
        sc = leak_scenario(name, spec)
        for rep in range(spec.replicates):
            model, report, config = train_leak_model(sc, seed=spec.seed + rep)
            cfg = {"scenario": name, "train": config.__dict__}
            system = TankNetworkSpec(leaks=sc["leaks"])
            g, values = leak_force_curves(model, grid)
            mags = np.max(np.abs(values), axis=1)
            leak_tanks = {lk.tank for lk in sc["leaks"]}
            window = np.abs(g) <= 0.5
            for k, idx in enumerate(model.force.mask):
                tank = idx - system.n_pipes
                mu = np.zeros((grid.size, system.n_tanks))
                mu[:, tank] = g
                truth = system.tank_force(mu)[:, tank]
                table.add(spec.id, name, tank + 1, rep, "force_max_abs", mags[k], cfg)
                table.add(spec.id, name, tank + 1, rep, "force_max_error_window",
                          np.max(np.abs(values[k][window] - truth[window])), cfg)
            leaking = [mags[k] for k, idx in enumerate(model.force.mask) if idx - system.n_pipes in leak_tanks]
            spurious = [mags[k] for k, idx in enumerate(model.force.mask) if idx - system.n_pipes not in leak_tanks]
            if spurious and leaking:
                table.add(spec.id, name, "all", rep, "spurious_ratio", max(spurious) / max(leaking), cfg)
            table.add(spec.id, name, "all", rep, "removal_mse", removal_mse(model, seed=spec.seed + 30_000), cfg)
            table.add(spec.id, name, "all", rep, "damping_relative_mean",
                      float(np.mean(model.damping / system.R_p)), cfg)
            rows = [(x, *vals) for x, vals in zip(g, values.T)]
            _write_csv(spec.curve_path(f"leak_force_{name}_{rep}.csv"),
                       ["mu"] + [f"f_tank{i - system.n_pipes + 1}" for i in model.force.mask], rows)
            if spec.out_dir is not None:
                _, before = rollout(model, TANK_X0, 0.0, 1.0, 0.01)
                _, after = rollout(remove_force(model), TANK_X0, 0.0, 1.0, 0.01)
                _write_csv(spec.curve_path(f"leak_removal_{name}_{rep}.csv"), ["t", "mu4_with_leak", "mu4_removed"],
                           zip(np.linspace(0, 1, 101), before[:, 8], after[:, 8]))
    return table


def run_tank_mpc(spec: ExperimentSpec) -> ResultTable:
    """Closed-loop control of the leaking tank network through a PHNN (trained or planted)."""
    plant = TankNetworkSpec(leaks=[LeakForce(3, -30.0, 0.3)])
    use_planted = spec.setting("planted", False, False)
    if use_planted:
        model = planted_model(plant)
        config = {"planted": True}
    else:
        sc = leak_scenario("b", spec)
        sc["data"] = {"n_traj": spec.setting("mpc_trajectories", 10, 10), "dt": 1 / 100, "sigma": 0.0}
        sc["epochs"] = spec.setting("mpc_epochs", 300, 3000)
        model, _, cfg = train_leak_model(sc, seed=spec.seed)
        config = {"train": cfg.__dict__}
    # default reference: the levels the leaking plant settles to under a constant admissible inflow
    mu_ref = spec.setting("mu_ref", None, None)
    if mu_ref is None:
        mu_ref = steady_levels(plant, 0, spec.setting("steady_inflow", 1.0, 1.0))
    ctrl = ControlSpec(mu_ref=np.asarray(mu_ref, dtype=np.float64),
                       dt=spec.setting("control_dt", 0.05, 0.01), horizon=spec.setting("horizon", 20, 20))
    trace = run_closed_loop(plant, model, ctrl, spec.setting("T", 10.0, 10.0), TANK_X0)
    path = spec.curve_path("mpc_trace.csv")
    if path is not None:
        trace.to_csv(path)
    table = ResultTable()
    mu_err = np.abs(trace.plant[-1][plant.n_pipes:] - ctrl.mu_ref)
    table.add(spec.id, "phnn", "all", 0, "terminal_level_error", mu_err.max(), config)
    table.add(spec.id, "phnn", "all", 0, "initial_stage_cost", trace.cost[0], config)
    table.add(spec.id, "phnn", "all", 0, "final_stage_cost", trace.cost[-1], config)
    return table


# ---------------------------------------------------------------------------
# contour grids
# ---------------------------------------------------------------------------


def emit_contour_grid(model, plane: tuple[int, int], grid, path=None) -> np.ndarray:
    """Adjusted Hamiltonian on a grid over states ``plane = (i, j)``, all other states zero.

    Returns rows ``(x_i, x_j, H(x) - H(0))``; writes them as CSV when ``path`` is given
    (an empty grid gives an empty file).
    """
    a, b = (np.asarray(v, dtype=np.float64) for v in grid)
    i, j = plane
    if a.size == 0 or b.size == 0:
        if path is not None:
            Path(path).write_text("")
        return np.zeros((0, 3))
    A, Bm = np.meshgrid(a, b, indexing="ij")
    x = np.zeros((A.size, model.dim))
    x[:, i] = A.ravel()
    x[:, j] = Bm.ravel()
    rows = np.column_stack([A.ravel(), Bm.ravel(), adjusted_hamiltonian(model, x)])
    _write_csv(path, [f"x{i + 1}", f"x{j + 1}", "H_adjusted"], rows)
    return rows


# ---------------------------------------------------------------------------
# dispatch
# ---------------------------------------------------------------------------


def run_experiment(spec: ExperimentSpec) -> ResultTable:
    if spec.id == "msd-datasize":
        table = run_msd_suite(spec)
    elif spec.id == "msd-trajectory":
        table = run_msd_suite(spec, sizes=spec.overrides.get("sizes", [2000, 5000, 10000]))
    elif spec.id == "msd-damping":
        table = run_msd_suite(spec, kinds=spec.overrides.get("models", ["phnn-qpt", "phnn-t"]))
    elif spec.id in ("msd-hamiltonian", "msd-force", "msd-freq"):
        table = run_msd_suite(spec, sizes=spec.overrides.get("sizes", [10000]),
                              kinds=spec.overrides.get("models", ["phnn-qpt", "phnn-t"]))
    elif spec.id == "tank-integrators":
        table = run_tank_integrators(spec)
    elif spec.id in ("tank-datasize", "tank-hamiltonian"):
        table = run_tank_datasize(spec)
    elif spec.id == "tank-leak":
        table = run_tank_leak(spec)
    else:
        table = run_tank_mpc(spec)
    if spec.out_dir is not None:
        table.write(spec.out_dir)
    return table
