"""Train every combination of a small hyper-parameter grid and report validation MRR.

Example: python scripts/grid_search.py DATA --grid learning_rate=0.05,0.1 reg=0.001,0.005 --base toy.cfg
"""

import argparse
import itertools
import json
from dataclasses import fields, replace

from mhyper.evaluation import aggregate, evaluate
from mhyper.kgdata import load_dataset
from mhyper.train import TrainConfig, train


def parse_grid(items):
    types = {f.name: f.type for f in fields(TrainConfig)}
    grid = {}
    for item in items:
        key, _, values = item.partition("=")
        if key not in types:
            raise SystemExit(f"unknown config key {key!r}")
        cast = {"int": int, "float": float, "bool": lambda s: s.lower() == "true"}.get(str(types[key]), str)
        grid[key] = [cast(v) for v in values.split(",")]
    return grid


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("dataset")
    p.add_argument("--grid", nargs="+", required=True, help="key=v1,v2,... entries")
    p.add_argument("--base", help="config file providing the non-grid values")
    p.add_argument("--out", help="write results as JSON lines here")
    args = p.parse_args()

    base = TrainConfig.from_file(args.base) if args.base else TrainConfig()
    graph, features = load_dataset(args.dataset)
    grid = parse_grid(args.grid)
    rows = []
    for combo in itertools.product(*grid.values()):
        cfg = replace(base, dataset=args.dataset, **dict(zip(grid, combo)))
        cfg.validate()
        res = train(cfg, graph, features)
        valid = aggregate(evaluate(res.model, graph, graph.valid))
        row = {**dict(zip(grid, combo)), "valid_mrr": valid["MRR"], "best_epoch": res.best_epoch}
        rows.append(row)
        print(json.dumps(row), flush=True)
    best = max(rows, key=lambda r: r["valid_mrr"])
    print("best:", json.dumps(best))
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.writelines(json.dumps(r) + "\n" for r in rows)


if __name__ == "__main__":
    main()
