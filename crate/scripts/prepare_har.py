#!/usr/bin/env python3
"""Convert the UCI HAR dataset into one CSV the loader understands.

Columns: one per feature named `<index>_<feature name>` (the raw names
repeat), then `subject` and `activity` (the activity name, e.g. WALKING).
Train and test partitions are concatenated; cross-validation happens
downstream.

    python3 scripts/prepare_har.py "UCI HAR Dataset" har.csv
"""

import argparse
import csv
import sys
from pathlib import Path


def read_table(path):
    with open(path) as f:
        return [line.split() for line in f if line.strip()]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("root", type=Path, help="extracted 'UCI HAR Dataset' directory")
    ap.add_argument("output", type=Path)
    args = ap.parse_args(argv)

    features = [f"{int(i)}_{name}" for i, name in read_table(args.root / "features.txt")]
    activities = {k: v for k, v in read_table(args.root / "activity_labels.txt")}

    rows = 0
    with open(args.output, "w", newline="") as out:
        w = csv.writer(out)
        w.writerow(features + ["subject", "activity"])
        for part in ("train", "test"):
            d = args.root / part
            xs = read_table(d / f"X_{part}.txt")
            ys = read_table(d / f"y_{part}.txt")
            subjects = read_table(d / f"subject_{part}.txt")
            if not (len(xs) == len(ys) == len(subjects)):
                sys.exit(f"{part}: row counts differ ({len(xs)}, {len(ys)}, {len(subjects)})")
            for x, (y,), (s,) in zip(xs, ys, subjects):
                if len(x) != len(features):
                    sys.exit(f"{part}: expected {len(features)} features, got {len(x)}")
                w.writerow(x + [s, activities[y]])
                rows += 1
    print(f"wrote {rows} rows, {len(features)} features to {args.output}")


if __name__ == "__main__":
    main()
