"""Persistence baseline on a seeded random walk, absolute vs relative target.

Copying the previous price scores near-perfect r2 on the absolute target
while carrying no directional information; on the relative target the same
predictor collapses to the null baseline.
"""

import argparse
import json

from chainsight.datasetgen import WindowSpec, build_dataset
from chainsight.fixture import random_walk_series
from chainsight.modeling import evaluate, make_predictor


def main():
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--ticks", type=int, default=1000)
    ap.add_argument("--wn", type=int, default=8)
    ap.add_argument("--norm", default="prop")
    args = ap.parse_args()

    series = random_walk_series(seed=args.seed, n_ticks=args.ticks)
    rows = {}
    for target in ("highPrice", "highPrice_rel"):
        ds = build_dataset(WindowSpec(args.wn, (target,), target, args.norm), series)
        report = evaluate(make_predictor("persistence", ds.input_shape), ds)
        rows[target] = report.to_json()
    print(json.dumps(rows, indent=2))


if __name__ == "__main__":
    main()
