"""Write the synthetic ring-shift graph as a dataset directory."""

import argparse

from mhyper.kgdata import save_dataset
from mhyper.toy import make_toy_kg


def main():
    p = argparse.ArgumentParser(description=__doc__)
    p.add_argument("out")
    p.add_argument("--entities", type=int, default=50)
    p.add_argument("--feature-dim", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    args = p.parse_args()
    graph, features = make_toy_kg(args.entities, feature_dim=args.feature_dim, seed=args.seed)
    save_dataset(args.out, graph, features)
    print(f"{graph.n_entities} entities, {graph.n_original_relations} relations, "
          f"{graph.n_train_original}/{len(graph.valid)}/{len(graph.test)} train/valid/test -> {args.out}")


if __name__ == "__main__":
    main()
