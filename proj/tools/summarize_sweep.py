#!/usr/bin/env python3
"""Pretty-print a `metarec sweep` CSV as per-mode seed x value tables.

For every mode the table shows one row per seed and one column per swept
value (inner-step count or length truncation), the per-seed best value, and
each cell's relative gap to that best. A final row averages over seeds.

Usage: tools/summarize_sweep.py runs/reports/<name>_sweep.csv [--metric test_mae]
"""

import argparse
import csv
import statistics
import sys
from collections import defaultdict


def load(path, metric):
    grids = defaultdict(dict)  # mode -> {(seed, value): metric}
    try:
        fh = open(path, newline="")
    except OSError as err:
        sys.exit(f"error: {err}")
    with fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or metric not in reader.fieldnames:
            sys.exit(f"error: {path} has no '{metric}' column "
                     f"(found: {reader.fieldnames})")
        protocol = None
        for row in reader:
            protocol = row["protocol"]
            cell = row[metric]
            value = float(cell) if cell else float("nan")
            grids[row["mode"]][(int(row["seed"]), int(row["value"]))] = value
    if not grids:
        sys.exit(f"error: {path} contains no data rows")
    return protocol, grids


def print_grid(mode, grid, metric):
    seeds = sorted({s for s, _ in grid})
    values = sorted({v for _, v in grid})
    width = max(9, len(metric) + 1)

    print(f"\nmode={mode}  ({metric})")
    header = "seed".ljust(6) + "".join(str(v).rjust(width) for v in values)
    print(header + "  best   gap-to-best-per-value")
    for s in seeds:
        row = [grid.get((s, v), float("nan")) for v in values]
        best = min(row)
        gaps = " ".join(f"{(r / best - 1) * 100:+5.1f}%" for r in row)
        cells = "".join(f"{r:{width}.4f}" for r in row)
        print(f"{s:<6}{cells}  {values[row.index(best)]:<6}{gaps}")
    if len(seeds) > 1:
        means = [statistics.fmean(grid.get((s, v), float("nan")) for s in seeds)
                 for v in values]
        cells = "".join(f"{m:{width}.4f}" for m in means)
        print(f"{'mean':<6}{cells}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("csv_path", help="sweep CSV written by `metarec sweep`")
    ap.add_argument("--metric", default="test_rmse",
                    choices=["test_rmse", "test_mae", "best_val_rmse"])
    args = ap.parse_args()

    protocol, grids = load(args.csv_path, args.metric)
    print(f"{args.csv_path}: protocol={protocol}, modes={sorted(grids)}")
    for mode in sorted(grids):
        print_grid(mode, grids[mode], args.metric)


if __name__ == "__main__":
    main()
