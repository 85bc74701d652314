"""Sweep corruption ratios for one corruption mode: corrupt, train, report test MRR per ratio.

Example: python scripts/robustness.py DATA --mode modality-missing --ratios 0 0.4 0.8 --base toy.cfg
"""

import argparse
from dataclasses import replace

from mhyper.evaluation import aggregate, evaluate
from mhyper.kgdata import CORRUPTION_MODES, corrupt_dataset, load_dataset
from mhyper.train import TrainConfig, train


def main():
    p = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    p.add_argument("dataset")
    p.add_argument("--mode", choices=CORRUPTION_MODES, required=True)
    p.add_argument("--ratios", type=float, nargs="+", default=[0.0, 0.2, 0.4, 0.6, 0.8])
    p.add_argument("--base", help="training config file")
    p.add_argument("--seed", type=int, default=0, help="corruption seed")
    args = p.parse_args()

    cfg = TrainConfig.from_file(args.base) if args.base else TrainConfig()
    cfg = replace(cfg, dataset=args.dataset)
    graph, features = load_dataset(args.dataset)
    print("ratio\tMRR\tHit@1\tHit@10")
    for ratio in args.ratios:
        g, f = corrupt_dataset(graph, features, args.mode, ratio, args.seed)
        m = aggregate(evaluate(train(cfg, g, f).model, g, g.test))
        print(f"{ratio:g}\t{100 * m['MRR']:.2f}\t{100 * m['Hit@1']:.2f}\t{100 * m['Hit@10']:.2f}", flush=True)


if __name__ == "__main__":
    main()
