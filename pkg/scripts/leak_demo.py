"""Train a PHNN on the leaking tank network, print the learned leak curve and
the rollout error after switching the leak off.

    python3 scripts/leak_demo.py --scenario b --epochs 30
"""

import argparse

import numpy as np

from phlab.experiments import ExperimentSpec, leak_force_curves, leak_scenario, removal_mse, train_leak_model


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("--scenario", default="b", choices=("a", "b", "c", "c-known", "d", "d-known"))
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--seed", type=int, default=0)
    args = parser.parse_args()

    scenario = leak_scenario(args.scenario, ExperimentSpec("tank-leak"))
    if args.epochs is not None:
        scenario["epochs"] = args.epochs
        step = max(args.epochs // 4, 1)
        if scenario["schedule"][0][1] > 0:
            scenario["schedule"] = [(0, 0.3), (step, 0.1), (2 * step, 0.03), (3 * step, 0.01)]
    model, report, _ = train_leak_model(scenario, seed=args.seed)
    print(f"trained {scenario['epochs']} epochs in {report.wall_clock:.0f}s, final loss {report.train_loss[-1]:.3e}")
    print("relative pipe damping:", np.round(model.damping / np.array([0.03, 0.03, 0.09, 0.03, 0.03]), 3))
    grid, values = leak_force_curves(model, np.linspace(-0.6, 0.6, 13))
    header = "mu".rjust(7) + "".join(f"tank{i - 4}".rjust(10) for i in model.force.mask)
    print(header)
    for k, mu in enumerate(grid):
        print(f"{mu:7.2f}" + "".join(f"{v:10.3f}" for v in values[:, k]))
    print(f"rollout MSE with the leak removed: {removal_mse(model, seed=args.seed + 1):.3e}")


if __name__ == "__main__":
    main()
