"""Print mean and standard deviation over replicates from one or more results.csv files.

    python3 scripts/summarize.py results/*/results.csv --metric mse --metric relative_friction_mean
"""

import argparse
import csv
from collections import defaultdict

import numpy as np


def main():
    parser = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    parser.add_argument("files", nargs="+")
    parser.add_argument("--metric", action="append", help="only these metrics (repeatable)")
    args = parser.parse_args()

    groups = defaultdict(list)
    for path in args.files:
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                if args.metric and row["metric"] not in args.metric:
                    continue
                groups[(row["experiment"], row["model"], row["size"], row["metric"])].append(float(row["value"]))

    print(f"{'experiment':<18}{'model':<12}{'size':<26}{'metric':<28}{'mean':>12}{'std':>12}{'n':>4}")
    for (exp, model, size, metric), values in sorted(groups.items()):
        v = np.asarray(values)
        v = v[np.isfinite(v)]
        mean = v.mean() if v.size else float("nan")
        std = v.std() if v.size else float("nan")
        print(f"{exp:<18}{model:<12}{size:<26}{metric:<28}{mean:>12.4g}{std:>12.3g}{len(values):>4}")


if __name__ == "__main__":
    main()
