"""Run several named experiments in sequence, one output directory each.

    python3 scripts/run_experiments.py msd-datasize tank-leak --scale desk --out results
    python3 scripts/run_experiments.py all --replicates 1 --set epochs=50
"""

import argparse
import json
import time
from pathlib import Path

from phlab.experiments import EXPERIMENT_IDS, ExperimentSpec, run_experiment


def parse_override(text):
    key, _, value = text.partition("=")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("ids", nargs="+", help="experiment ids, or 'all'")
    parser.add_argument("--scale", choices=("desk", "paper"), default="desk")
    parser.add_argument("--replicates", type=int)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--workers", type=int, default=1)
    parser.add_argument("--set", action="append", default=[], metavar="KEY=VALUE")
    parser.add_argument("--out", default="results")
    args = parser.parse_args()

    ids = list(EXPERIMENT_IDS) if args.ids == ["all"] else args.ids
    overrides = dict(parse_override(s) for s in args.set)
    for exp_id in ids:
        start = time.perf_counter()
        spec = ExperimentSpec(exp_id, replicates=args.replicates, scale=args.scale, overrides=overrides,
                              out_dir=str(Path(args.out) / exp_id), seed=args.seed, workers=args.workers)
        table = run_experiment(spec)
        print(f"{exp_id}: {len(table)} rows in {time.perf_counter() - start:.0f}s -> {spec.out_dir}", flush=True)


if __name__ == "__main__":
    main()
