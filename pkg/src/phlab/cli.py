"""Command-line entry point: ``phlab gen | train | exp | mpc``."""

from __future__ import annotations

import argparse
import csv
import json
import sys

import numpy as np

from .datagen import build_dataset, dataset_system, load_dataset, save_dataset
from .experiments import EXPERIMENT_IDS, ExperimentSpec, run_experiment
from .integrators import DISCRETIZATIONS
from .models import load_checkpoint
from .mpc import ControlSpec, run_closed_loop
from .systems import MassSpringSpec, load_system
from .training import TrainConfig, evaluate, parse_lambda_schedule, train

MODEL_CHOICES = ("phnn", "phnn-ft", "baseline1", "baseline2")


def _floats(text: str) -> list[float]:
    return [float(v) for v in text.split(",") if v.strip()]


def model_for_system(kind: str, system) -> dict:
    """Descriptor of a ``kind`` model with structure taken from ``system``."""
    state_dependent = not isinstance(system, MassSpringSpec)
    if kind.startswith("baseline"):
        return {"kind": "baseline", "variant": "one-net" if kind == "baseline1" else "two-net",
                "dim": system.dim, "autonomous": state_dependent and kind == "baseline1"}
    desc = {"kind": "phnn", "dim": system.dim, "S": system.structure().tolist(),
            "damped": system.damped_indices, "force_mode": None, "force_mask": None}
    if system.force_indices:
        desc["force_mask"] = list(system.force_indices)
        if kind == "phnn-ft":
            desc["force_mode"] = "time"
        else:
            desc["force_mode"] = "state" if state_dependent else "state_time"
    return desc


def cmd_gen(args) -> int:
    system = load_system(args.system)
    data = build_dataset(system, args.samples, args.length, args.dt, args.noise, args.seed)
    save_dataset(data, args.out)
    print(f"wrote {len(data)} trajectories ({data.n_samples} samples) to {args.out}")
    return 0


def cmd_train(args) -> int:
    data = load_dataset(args.data)
    system = dataset_system(data)
    config = TrainConfig(model=model_for_system(args.model, system), epochs=args.epochs, batch_size=args.batch,
                         lr=args.lr, integrator=args.integrator,
                         lambda_schedule=parse_lambda_schedule(args.lambda_schedule), seed=args.seed)
    validation = load_dataset(args.val_data) if args.val_data else None
    model, report = train(config, data, validation, checkpoint=args.out, log_every=args.log_every)
    report.to_json(args.out + ".report.json")
    with open(args.out + ".metrics.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        n_damp = len(report.damping[0]) if report.damping else 0
        w.writerow(["epoch", "train_loss", "val_loss"] + [f"r_{i + 1}" for i in range(n_damp)])
        for e, tl in enumerate(report.train_loss):
            vl = report.val_loss[e] if e < len(report.val_loss) else ""
            w.writerow([e, f"{tl:.17g}", vl if vl == "" else f"{vl:.17g}"] + [f"{r:.17g}" for r in report.damping[e]])
    if validation is not None:
        metrics = evaluate(model, validation, "rk4", system)
        print(" ".join(f"{k}={v:.6g}" for k, v in metrics.items()))
    print(f"checkpoint written to {args.out} (damping {np.round(model.damping, 5).tolist()})")
    return 0


def _override(text: str) -> tuple[str, object]:
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise argparse.ArgumentTypeError(f"expected KEY=VALUE, got {text!r}")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def cmd_exp(args) -> int:
    overrides = dict(args.set or [])
    if args.epochs is not None:
        overrides["epochs"] = args.epochs
    spec = ExperimentSpec(args.experiment, replicates=args.replicates, scale=args.scale, overrides=overrides,
                          out_dir=args.out_dir, seed=args.seed, workers=args.workers)
    table = run_experiment(spec)
    for row in table.summary():
        print(f"{row['model']:>10} {str(row['size']):>24} {row['metric']:>28} "
              f"{row['mean']:.6g} +- {row['std']:.3g} (n={row['n']})")
    return 0


def cmd_mpc(args) -> int:
    model = load_checkpoint(args.model)
    plant = load_system(args.plant)
    u_min, u_max = _floats(args.bounds)
    spec = ControlSpec(mu_ref=_floats(args.ref), tank=args.tank - 1, u_min=u_min, u_max=u_max,
                       horizon=args.horizon, dt=args.dt, iterations=args.iterations)
    x0 = np.array(_floats(args.x0)) if args.x0 else np.zeros(plant.dim)
    trace = run_closed_loop(plant, model, spec, args.T, x0)
    trace.to_csv(args.out)
    err = np.max(np.abs(trace.plant[-1][plant.dim - spec.n_levels:] - spec.mu_ref))
    status = "aborted (plant diverged)" if trace.aborted else "completed"
    print(f"{status}: {len(trace.t)} steps, terminal level error {err:.3e}; trace in {args.out}")
    return 1 if trace.aborted else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="phlab", description="Pseudo-Hamiltonian system identification lab")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="simulate a training data set")
    gen.add_argument("--system", required=True, help="system JSON file")
    gen.add_argument("--samples", type=int, required=True)
    gen.add_argument("--dt", type=float, required=True)
    gen.add_argument("--length", type=float, required=True)
    gen.add_argument("--noise", type=float, default=0.0)
    gen.add_argument("--seed", type=int, default=0)
    gen.add_argument("--out", required=True)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train a model on a data set")
    tr.add_argument("--data", required=True)
    tr.add_argument("--val-data")
    tr.add_argument("--model", choices=MODEL_CHOICES, default="phnn")
    tr.add_argument("--integrator", choices=sorted(DISCRETIZATIONS), default="midpoint")
    tr.add_argument("--epochs", type=int, default=100)
    tr.add_argument("--batch", type=int, default=32)
    tr.add_argument("--lr", type=float, default=1e-3)
    tr.add_argument("--lambda-schedule", default="0:0")
    tr.add_argument("--seed", type=int, default=0)
    tr.add_argument("--log-every", type=int, default=0)
    tr.add_argument("--out", required=True)
    tr.set_defaults(func=cmd_train)

    ex = sub.add_parser("exp", help="run a named experiment")
    ex.add_argument("experiment", choices=EXPERIMENT_IDS)
    ex.add_argument("--scale", choices=("desk", "paper"), default="desk")
    ex.add_argument("--replicates", type=int)
    ex.add_argument("--epochs", type=int)
    ex.add_argument("--seed", type=int, default=0)
    ex.add_argument("--workers", type=int, default=1)
    ex.add_argument("--out-dir", default="results")
    ex.add_argument("--set", type=_override, action="append", metavar="KEY=VALUE",
                    help="override a protocol setting (JSON value), e.g. sizes=[1000]")
    ex.set_defaults(func=cmd_exp)

    mp = sub.add_parser("mpc", help="closed-loop level control through a trained model")
    mp.add_argument("--model", required=True, help="checkpoint path")
    mp.add_argument("--plant", required=True, help="system JSON file")
    mp.add_argument("--ref", required=True, help="comma-separated reference levels")
    mp.add_argument("--tank", type=int, default=1, help="controlled tank (1-based)")
    mp.add_argument("--horizon", type=int, default=20)
    mp.add_argument("--bounds", default="-2,2")
    mp.add_argument("--dt", type=float, default=0.01)
    mp.add_argument("--iterations", type=int, default=100)
    mp.add_argument("--T", type=float, default=10.0)
    mp.add_argument("--x0", help="comma-separated initial state (default zeros)")
    mp.add_argument("--out", required=True)
    mp.set_defaults(func=cmd_mpc)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
